"""Dense vector/scalar primitives shared by every other module.

Values are stored as float32 throughout the package; every reduction here
accumulates in float64 and returns float64.
"""

import logging

import numpy as np

logger = logging.getLogger(__name__)

# Norms below this are treated as zero (cosine of a near-zero vector is 0,
# not NaN; residuals legitimately shrink toward zero across layers).
EPS_NORM = 1e-12


def _as_vector(a, name: str = "vector") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    return arr


def dot(a, b) -> float:
    """Inner product of two equal-length vectors, accumulated in float64."""
    av = _as_vector(a, "a")
    bv = _as_vector(b, "b")
    if av.shape[0] != bv.shape[0]:
        raise ValueError(f"dimension mismatch: {av.shape[0]} vs {bv.shape[0]}")
    return float(np.dot(av, bv))


def l2_norm(a) -> float:
    """Euclidean norm; the zero vector maps to 0."""
    av = _as_vector(a, "a")
    return float(np.sqrt(np.dot(av, av)))


def cosine_sim(a, b) -> float:
    """Cosine similarity, defined as 0 when either norm is below EPS_NORM."""
    av = _as_vector(a, "a")
    bv = _as_vector(b, "b")
    if av.shape[0] != bv.shape[0]:
        raise ValueError(f"dimension mismatch: {av.shape[0]} vs {bv.shape[0]}")
    na = np.sqrt(np.dot(av, av))
    nb = np.sqrt(np.dot(bv, bv))
    if na < EPS_NORM or nb < EPS_NORM:
        return 0.0
    return float(np.dot(av, bv) / (na * nb))


def softmax(s) -> np.ndarray:
    """Numerically safe softmax (max-subtracted) of a nonempty vector."""
    sv = _as_vector(s, "s")
    if sv.shape[0] == 0:
        raise ValueError("softmax of an empty vector is undefined")
    if not np.all(np.isfinite(sv)):
        raise ValueError("softmax input contains non-finite values")
    shifted = sv - sv.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_rows(s: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array (float64)."""
    shifted = s - s.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def pca_project(data, target_dims: int, max_iters: int = 100, tol: float = 1e-7) -> np.ndarray:
    """Project rows of `data` onto their top principal directions.

    Directions are extracted by power iteration with deflation on the
    covariance matrix. Degenerate data (zero total variance) yields an
    all-zero projection and a logged warning.

    Returns a (rows, target_dims) float32 array of projected coordinates.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"data must be 2-dimensional, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 rows, got {n}")
    if not 1 <= target_dims <= d:
        raise ValueError(f"target_dims must be in [1, {d}], got {target_dims}")

    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    rng = np.random.default_rng(0)

    directions = np.zeros((d, target_dims))
    work = cov.copy()
    found = 0
    for comp in range(target_dims):
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        eig = 0.0
        for _ in range(max_iters):
            w = work @ v
            nw = np.linalg.norm(w)
            if nw < EPS_NORM:
                eig = 0.0
                break
            v = w / nw
            new_eig = float(v @ work @ v)
            if eig != 0.0 and abs(new_eig - eig) < tol * abs(eig):
                eig = new_eig
                break
            eig = new_eig
        if eig <= EPS_NORM:
            break
        directions[:, comp] = v
        work = work - eig * np.outer(v, v)
        found += 1

    if found == 0:
        logger.warning("pca_project: data has no variance, returning zero projection")
    return (centered @ directions).astype(np.float32)

"""Reference-vector projection layer.

Splits an embedding x into a component along a learnable reference vector r
(scaled by the projection coefficient alpha) and an initial residual that is
orthogonal to r. Both the forward decomposition and its exact gradients are
provided; training updates r through these gradients.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import EPS_NORM

__all__ = [
    "DegenerateParameterError",
    "ProjectionResult",
    "init_reference",
    "project_forward",
    "project_backward",
]


class DegenerateParameterError(RuntimeError):
    """Raised when the reference vector has collapsed to (near) zero norm."""


@dataclass
class ProjectionResult:
    alpha: float
    residual: np.ndarray


def init_reference(matrix: np.ndarray, seed: int = 0) -> np.ndarray:
    """Initial reference vector: the mean of all embeddings.

    Falls back to a random unit vector when the mean is (near) zero.
    """
    x = np.asarray(matrix, dtype=np.float64)
    mean = x.mean(axis=0)
    if np.linalg.norm(mean) < EPS_NORM:
        v = np.random.default_rng(seed).normal(size=x.shape[1])
        mean = v / np.linalg.norm(v)
    return mean.astype(np.float32)


def _check_ref(r: np.ndarray) -> np.ndarray:
    rv = np.asarray(r, dtype=np.float64)
    if np.linalg.norm(rv) < EPS_NORM:
        raise DegenerateParameterError(
            f"reference vector norm {np.linalg.norm(rv):.3e} is below {EPS_NORM:.0e}"
        )
    return rv


def project_forward(x, ref) -> ProjectionResult:
    """Decompose x as alpha * r + residual with residual orthogonal to r."""
    xv = np.asarray(x, dtype=np.float64)
    rv = _check_ref(ref)
    if xv.shape != rv.shape:
        raise ValueError(f"dimension mismatch: x {xv.shape} vs r {rv.shape}")
    rr = float(np.dot(rv, rv))
    alpha = float(np.dot(xv, rv)) / rr
    residual = xv - alpha * rv
    return ProjectionResult(alpha=alpha, residual=residual)


def project_backward(x, ref, grad_alpha: float, grad_residual) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of (alpha, residual) with respect to x and r.

    Composes the incoming gradients with
        d(alpha)/dx = r / ||r||^2
        d(alpha)/dr = (x - 2 alpha r) / ||r||^2
        d(residual)/dx = I - r r^T / ||r||^2
    and the -alpha*r chain inside the residual.
    """
    xv = np.asarray(x, dtype=np.float64)
    rv = _check_ref(ref)
    gres = np.asarray(grad_residual, dtype=np.float64)
    if xv.shape != rv.shape or gres.shape != rv.shape:
        raise ValueError("dimension mismatch between x, r and grad_residual")
    rr = float(np.dot(rv, rv))
    alpha = float(np.dot(xv, rv)) / rr
    # total gradient reaching alpha: the direct term plus the -alpha*r route
    ga = float(grad_alpha) - float(np.dot(gres, rv))
    grad_x = gres + ga * rv / rr
    grad_r = -alpha * gres + ga * (xv - 2.0 * alpha * rv) / rr
    return grad_x, grad_r

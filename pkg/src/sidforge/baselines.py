"""Comparison quantizers: Lloyd's K-Means, residual K-Means, and the
straight-through-estimator VQ/RQ baselines. All of them emit SID tables with
the same schema as the rating quantizer so one evaluation path covers
everything.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .quantizer import ModelParams, _dist2

logger = logging.getLogger(__name__)


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, d) float32
    assignments: np.ndarray  # (n,) int64, nearest centroid, ties -> lowest index
    inertia: float


def kmeans(points, k: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """K-Means with k-means++ seeding and Lloyd iterations.

    Runs until the assignment reaches a fixpoint or max_iters. Empty clusters
    are re-seeded to the point farthest from its current centroid. Requesting
    more centroids than points pads with jittered duplicates and warns.
    Deterministic given the seed.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError(f"points must be a nonempty 2-D array, got shape {pts.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n, d = pts.shape
    rng = np.random.default_rng(seed)

    if k > n:
        logger.warning("kmeans: k=%d exceeds %d points, padding with jittered duplicates", k, n)
        scale = max(float(np.abs(pts).max()), 1.0)
        centers = np.empty((k, d))
        centers[:n] = pts
        for i in range(n, k):
            centers[i] = pts[i % n] + rng.normal(size=d) * 1e-9 * scale
    else:
        centers = np.empty((k, d))
        centers[0] = pts[rng.integers(n)]
        d2 = ((pts - centers[0]) ** 2).sum(axis=1)
        for i in range(1, k):
            total = d2.sum()
            if total <= 0.0:
                centers[i] = pts[rng.integers(n)]
            else:
                centers[i] = pts[rng.choice(n, p=d2 / total)]
            d2 = np.minimum(d2, ((pts - centers[i]) ** 2).sum(axis=1))

    assign = None
    inertia = np.inf
    for _ in range(max_iters):
        dists = _dist2(pts, centers)
        new_assign = dists.argmin(axis=1)
        new_inertia = float(dists[np.arange(n), new_assign].sum())
        assert new_inertia <= inertia * (1 + 1e-12) + 1e-12, "Lloyd inertia increased"
        inertia = new_inertia
        if assign is not None and np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign

        sums = np.zeros((k, d))
        np.add.at(sums, assign, pts)
        counts = np.bincount(assign, minlength=k)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            point_d2 = dists[np.arange(n), assign]
            farthest = np.argsort(-point_d2, kind="stable")
            for slot, e_idx in enumerate(empties):
                centers[e_idx] = pts[farthest[slot % n]]
    else:
        # max_iters exhausted after a centroid update: restore consistency
        dists = _dist2(pts, centers)
        assign = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), assign].sum())

    return KMeansResult(centroids=centers.astype(np.float32),
                        assignments=assign.astype(np.int64),
                        inertia=inertia)


def residual_kmeans(dataset, config):
    """Layered K-Means: each layer clusters the previous layer's residuals.

    No gradient training. Returns the fitted parameters and the SID table
    given by the per-layer assignments.
    """
    from .dataio import SidTable

    X = np.asarray(dataset.matrix, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot fit residual K-Means on an empty dataset")
    L, M = config.num_layers, config.codebook_size
    books = np.empty((L, M, X.shape[1]), dtype=np.float32)
    codes = np.empty((n, L), dtype=np.int64)
    residuals = X
    for l in range(L):
        result = kmeans(residuals, M, seed=(config.seed * 1_000_003 + l + 1) % 2**31,
                        max_iters=1000)
        books[l] = result.centroids
        codes[:, l] = result.assignments
        residuals = residuals - np.asarray(result.centroids, dtype=np.float64)[result.assignments]
    params = ModelParams(method="rkmeans", ref=None, codebooks=books, top_k=1)
    table = SidTable(item_ids=list(dataset.item_ids), codes=codes, codebook_size=M)
    return params, table


def ste_forward(X: np.ndarray, codebooks: np.ndarray):
    """Hard nearest-codeword residual chain (float64).

    Returns (indices (L, B), residual chain list of L+1 arrays, ehat_sum).
    """
    C = np.asarray(codebooks, dtype=np.float64)
    L = C.shape[0]
    e = np.asarray(X, dtype=np.float64)
    chain = [e]
    idxs = np.empty((L, e.shape[0]), dtype=np.int64)
    ehat_sum = np.zeros_like(e)
    for l in range(L):
        idx = _dist2(chain[l], C[l]).argmin(axis=1)
        cw = C[l][idx]
        idxs[l] = idx
        ehat_sum += cw
        chain.append(chain[l] - cw)
    return idxs, chain, ehat_sum


def ste_losses_and_grads(X: np.ndarray, codebooks: np.ndarray, commitment_beta: float):
    """One STE training step's losses and codebook gradients.

    The reconstruction gradient is copied past the lookup (straight-through);
    with fixed input embeddings it has no trainable destination, so codebooks
    learn from the codebook loss ||sg[e] - c||^2 alone. The commitment loss
    beta * ||e - sg[c]||^2 is reported in the total but produces no parameter
    gradient here for the same reason.
    """
    C = np.asarray(codebooks, dtype=np.float64)
    L, M, d = C.shape
    B = X.shape[0]
    idxs, chain, ehat_sum = ste_forward(X, C)
    rec = float(((np.asarray(X, dtype=np.float64) - ehat_sum) ** 2).sum(axis=1).mean())
    grad_c = np.zeros((L, M, d))
    cb_loss = 0.0
    for l in range(L):
        diff = C[l][idxs[l]] - chain[l]  # c - sg[e]
        cb_loss += float((diff ** 2).sum(axis=1).mean())
        contrib = np.zeros((M, d))
        np.add.at(contrib, idxs[l], diff)
        grad_c[l] = 2.0 * contrib / B
    total = rec + cb_loss + commitment_beta * cb_loss
    return idxs, rec, cb_loss, total, grad_c


def vq_vae_train(dataset, config):
    """Single-layer STE vector quantizer (the L=1 degenerate hierarchy)."""
    from .trainer import train
    from dataclasses import replace

    return train(dataset, replace(config, method="vqvae", num_layers=1))


def rq_vae_train(dataset, config):
    """L-layer STE residual quantizer trained with the shared optimizer."""
    from .trainer import train
    from dataclasses import replace

    return train(dataset, replace(config, method="rqvae"))

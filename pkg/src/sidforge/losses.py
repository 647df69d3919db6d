"""Reconstruction loss, batch-level cohesion/discrimination regularizers,
their combination into the total training objective, and the analytic
gradients of all of it with respect to the reference vector and codebooks.

Reduction convention: squared error is summed over components per item and
averaged over the batch, which keeps the regularization weight's scale
independent of batch size.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import EPS_NORM
from .quantizer import (
    BatchForward,
    ModelParams,
    ParamGrads,
    _backward_batch,
    _batch_from_traces,
)

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    rec: float
    sc_term: float
    pd_term: float
    metric: float  # -sc_term + pd_term
    total: float  # rec + lam * metric
    lam: float


def reconstruction_loss(trace, x) -> float:
    """Squared reconstruction error ||x - (alpha*r + sum_l ehat^(l))||^2.

    Equals the squared norm of the final residual by the telescoping
    identity.
    """
    xv = np.asarray(x, dtype=np.float64)
    along_ref = xv - trace.projection.residual  # alpha * r, exactly as projected
    recon = along_ref + sum(layer.quantized for layer in trace.layers)
    diff = xv - recon
    return float(np.dot(diff, diff))


def _sc_arrays(q: np.ndarray, level1_codes: np.ndarray):
    """Mean pairwise cosine of q vectors inside each level-1 code group.

    Returns (sc_value, grad_wrt_q, n_qualifying_groups); groups of size 1 are
    skipped, and if none qualifies the value is 0 with a zero gradient.
    The gradient is of sc_value itself (no sign flip, no lambda).
    """
    norms = np.linalg.norm(q, axis=1)
    safe = np.where(norms < EPS_NORM, 1.0, norms)
    qh = q / safe[:, None]
    qh[norms < EPS_NORM] = 0.0

    grad = np.zeros_like(q)
    group_values = []
    group_data = []
    for code in np.unique(level1_codes):
        members = np.flatnonzero(level1_codes == code)
        n = members.size
        if n < 2:
            continue
        qg = qh[members]
        total = qg.sum(axis=0)
        ssq = float((qg * qg).sum())
        pair_sum = (float(total @ total) - ssq) / 2.0
        group_values.append(pair_sum * 2.0 / (n * n - n))
        group_data.append((members, total, n))
    n_groups = len(group_values)
    if n_groups == 0:
        return 0.0, grad, 0
    for members, total, n in group_data:
        rowsums = qh[members] @ total
        coef = (1.0 / n_groups) * (2.0 / (n * n - n))
        ok = norms[members] >= EPS_NORM
        g = coef * (total[None, :] - rowsums[:, None] * qh[members]) / safe[members, None]
        g[~ok] = 0.0
        grad[members] += g
    return float(np.mean(group_values)), grad, n_groups


def batch_sc(traces) -> float:
    """Training-time cohesion surrogate over a batch of quantization traces.

    Items are grouped by their layer-1 code; within each group of size >= 2
    the mean pairwise cosine of the cumulative quantized embeddings is taken,
    then averaged across groups. Returns 0 when no group qualifies.
    """
    if len(traces) < 2:
        raise ValueError(f"batch_sc needs at least 2 items, got {len(traces)}")
    q = np.stack([sum(layer.quantized for layer in t.layers) for t in traces])
    codes = np.array([int(t.sid[0]) for t in traces])
    value, _, n_groups = _sc_arrays(q, codes)
    if n_groups == 0:
        logger.debug("batch_sc: no level-1 group of size >= 2 in this batch")
    return value


def _pd_codebooks(C: np.ndarray, t: float):
    """Discrimination term over each layer's codewords, mean across layers.

    Returns (pd_value, grad_wrt_codebooks) where the gradient is of pd_value
    itself.
    """
    L, M, _ = C.shape
    values = np.empty(L)
    grad = np.zeros_like(C)
    for l in range(L):
        cw = C[l]
        cn = np.linalg.norm(cw, axis=1)
        safe = np.where(cn < EPS_NORM, 1.0, cn)
        ch = cw / safe[:, None]
        ch[cn < EPS_NORM] = 0.0
        cos = ch @ ch.T
        expm = np.exp(-t * (1.0 - cos))
        np.fill_diagonal(expm, 0.0)
        pair_sum = expm.sum() / 2.0
        mean_pairs = pair_sum * 2.0 / (M * (M - 1))
        values[l] = np.log(mean_pairs)
        # d(values[l])/d(cos_ab) = t * expm_ab / pair_sum per unordered pair
        coef = t * expm / pair_sum
        contrib = (coef @ ch - (coef * cos).sum(axis=1)[:, None] * ch) / safe[:, None]
        contrib[cn < EPS_NORM] = 0.0
        grad[l] = contrib / L
    return float(values.mean()), grad


def batch_pd(params: ModelParams, t: float = 2.0) -> float:
    """Discrimination of each layer's codewords, treated as centroids."""
    if t <= 0:
        raise ValueError(f"t must be positive, got {t}")
    if params.codebook_size < 2:
        raise ValueError("batch_pd needs at least 2 codewords per layer")
    value, _ = _pd_codebooks(np.asarray(params.codebooks, dtype=np.float64), t)
    return value


def total_loss(rec: float, sc: float, pd: float, lam: float) -> LossBreakdown:
    """Combine the terms: total = rec + lam * (-sc + pd)."""
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    metric = -sc + pd
    return LossBreakdown(rec=rec, sc_term=sc, pd_term=pd, metric=metric,
                         total=rec + lam * metric, lam=lam)


def _loss_grads_batch(fwd: BatchForward, params: ModelParams, lam: float, t: float):
    """Gradients of the total loss for a batched forward pass.

    Returns (grad_ref, grad_codebooks, LossBreakdown).
    """
    B = fwd.x.shape[0]
    L = params.num_layers
    C64 = np.asarray(params.codebooks, dtype=np.float64)

    e_last = fwd.residuals[-1]
    rec = float((e_last ** 2).sum(axis=1).mean())
    grad_xhat = (-2.0 / B) * e_last

    q = fwd.ehat.sum(axis=0)
    sc_value, sc_grad_q, _ = _sc_arrays(q, fwd.sids[:, 0])
    grad_ehat = np.broadcast_to((-lam) * sc_grad_q, (L, B, q.shape[1]))

    pd_value, pd_grad_c = _pd_codebooks(C64, t)

    grad_ref, grad_c, _ = _backward_batch(fwd, params.ref, params.codebooks,
                                          grad_xhat, grad_ehat)
    grad_c = grad_c + lam * pd_grad_c
    breakdown = total_loss(rec, sc_value, pd_value, lam)
    return grad_ref, grad_c, breakdown


def loss_gradients(traces, params: ModelParams, lam: float = 0.01,
                   t: float = 2.0) -> tuple[ParamGrads, LossBreakdown]:
    """Gradients of the total loss over a batch of quantization traces."""
    if not traces:
        raise ValueError("loss_gradients needs a nonempty batch")
    fwd = _batch_from_traces(traces, params)
    grad_ref, grad_c, breakdown = _loss_grads_batch(fwd, params, lam, t)
    return ParamGrads(ref=grad_ref, codebooks=grad_c), breakdown

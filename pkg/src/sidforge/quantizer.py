"""Hierarchical rating quantization stack.

Each of the L layers rates the incoming residual against its codebook by
cosine similarity, softmaxes the scores into weights, mixes the top-K
codewords into a soft quantized vector and passes the leftover residual to
the next layer. SIDs are the per-layer argmax indices. The backward pass is
an exact reverse traversal of this computation; the top-K selection mask and
the argmax are treated as constants (they are piecewise constant in the
parameters).
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import EPS_NORM, softmax_rows
from .projection import ProjectionResult

logger = logging.getLogger(__name__)


@dataclass
class QuantizerConfig:
    num_layers: int
    codebook_size: int
    top_k: int
    embedding_dim: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.codebook_size < 2:
            raise ValueError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if not 1 <= self.top_k <= self.codebook_size:
            raise ValueError(
                f"top_k must be in [1, {self.codebook_size}], got {self.top_k}"
            )
        if self.embedding_dim < 1:
            raise ValueError(f"embedding_dim must be >= 1, got {self.embedding_dim}")


@dataclass
class Codebook:
    layer_index: int  # 1-based
    codewords: np.ndarray  # (M, d) float32


@dataclass
class LayerTrace:
    input_residual: np.ndarray
    scores: np.ndarray
    weights: np.ndarray
    selected_indices: np.ndarray  # K indices, descending weight, ties -> lowest index
    renormalized_weights: np.ndarray
    quantized: np.ndarray
    output_residual: np.ndarray


@dataclass
class QuantizationTrace:
    projection: ProjectionResult
    layers: list
    sid: np.ndarray  # (L,) int64


@dataclass
class ModelParams:
    """Learnable state of a quantizer plus enough metadata to run it.

    `method` selects the forward rule: "r3" uses the rating mechanism, every
    other method (rqvae, vqvae, rkmeans, kmeans) uses hard nearest-codeword
    lookups on Euclidean residuals.
    """

    method: str
    ref: np.ndarray | None  # (d,) float32, None when the projection layer is disabled
    codebooks: np.ndarray  # (L, M, d) float32
    top_k: int

    @property
    def num_layers(self) -> int:
        return self.codebooks.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    @property
    def dim(self) -> int:
        return self.codebooks.shape[2]

    def codebook(self, layer_index: int) -> Codebook:
        return Codebook(layer_index, self.codebooks[layer_index - 1])


@dataclass
class ParamGrads:
    ref: np.ndarray | None
    codebooks: np.ndarray


@dataclass
class BatchForward:
    """All intermediates of a batched soft forward pass (float64)."""

    x: np.ndarray  # (B, d)
    alpha: np.ndarray  # (B,)
    residuals: list  # L+1 arrays (B, d); residuals[0] is e^(0)
    scores: np.ndarray  # (L, B, M)
    weights: np.ndarray  # (L, B, M)
    sel_idx: np.ndarray  # (L, B, K)
    sel_weights: np.ndarray  # (L, B, K) renormalized
    sel_sums: np.ndarray  # (L, B) pre-renormalization weight mass
    ehat: np.ndarray  # (L, B, d)
    sids: np.ndarray  # (B, L)
    res_norms: np.ndarray = field(default=None)  # (L, B)
    cw_norms: np.ndarray = field(default=None)  # (L, M)


def _forward_batch(x: np.ndarray, ref, codebooks: np.ndarray, top_k: int) -> BatchForward:
    """Soft forward pass over a batch. Inputs are upcast to float64."""
    X = np.asarray(x, dtype=np.float64)
    C = np.asarray(codebooks, dtype=np.float64)
    L, M, d = C.shape
    B = X.shape[0]
    K = top_k

    if ref is None:
        alpha = np.zeros(B)
        e = X.copy()
    else:
        r = np.asarray(ref, dtype=np.float64)
        rr = float(r @ r)
        alpha = X @ r / rr
        e = X - alpha[:, None] * r

    residuals = [e]
    scores = np.empty((L, B, M))
    weights = np.empty((L, B, M))
    sel_idx = np.empty((L, B, K), dtype=np.int64)
    sel_weights = np.empty((L, B, K))
    sel_sums = np.empty((L, B))
    ehat = np.empty((L, B, d))
    res_norms = np.empty((L, B))
    cw_norms = np.empty((L, M))

    for l in range(L):
        u = residuals[l]
        un = np.linalg.norm(u, axis=1)
        cn = np.linalg.norm(C[l], axis=1)
        un_safe = np.where(un < EPS_NORM, 1.0, un)
        cn_safe = np.where(cn < EPS_NORM, 1.0, cn)
        s = (u @ C[l].T) / (un_safe[:, None] * cn_safe[None, :])
        s[un < EPS_NORM, :] = 0.0
        s[:, cn < EPS_NORM] = 0.0
        w = softmax_rows(s)

        # stable argsort on -w: equal weights keep index order (lowest wins)
        order = np.argsort(-w, axis=1, kind="stable")
        idx = order[:, :K]
        picked = np.take_along_axis(w, idx, axis=1)
        mass = picked.sum(axis=1)
        renorm = picked / mass[:, None]
        mix = np.zeros((B, M))
        np.put_along_axis(mix, idx, renorm, axis=1)
        eh = mix @ C[l]

        scores[l] = s
        weights[l] = w
        sel_idx[l] = idx
        sel_weights[l] = renorm
        sel_sums[l] = mass
        ehat[l] = eh
        res_norms[l] = un
        cw_norms[l] = cn
        residuals.append(u - eh)

    sids = sel_idx[:, :, 0].T.copy()  # argmax == first of the stable descending order
    return BatchForward(
        x=X, alpha=alpha, residuals=residuals, scores=scores, weights=weights,
        sel_idx=sel_idx, sel_weights=sel_weights, sel_sums=sel_sums, ehat=ehat,
        sids=sids, res_norms=res_norms, cw_norms=cw_norms,
    )


def _backward_batch(fwd: BatchForward, ref, codebooks: np.ndarray,
                    grad_xhat: np.ndarray | None,
                    grad_ehat: np.ndarray | None):
    """Reverse traversal of `_forward_batch`.

    grad_xhat: (B, d) gradient on the reconstruction alpha*r + sum(ehat).
    grad_ehat: (L, B, d) extra per-layer gradients on each ehat, or None.
    Returns (grad_ref, grad_codebooks, grad_x) summed over the batch for the
    parameters, per item for x.
    """
    C = np.asarray(codebooks, dtype=np.float64)
    L, M, d = C.shape
    B = fwd.x.shape[0]
    if grad_xhat is None:
        grad_xhat = np.zeros((B, d))
    else:
        grad_xhat = np.asarray(grad_xhat, dtype=np.float64)

    grad_c = np.zeros((L, M, d))
    g_e = np.zeros((B, d))  # gradient w.r.t. the current layer's output residual

    for l in range(L - 1, -1, -1):
        u = fwd.residuals[l]
        s = fwd.scores[l]
        w = fwd.weights[l]
        idx = fwd.sel_idx[l]
        renorm = fwd.sel_weights[l]
        mass = fwd.sel_sums[l]
        un = fwd.res_norms[l]
        cn = fwd.cw_norms[l]
        un_safe = np.where(un < EPS_NORM, 1.0, un)
        cn_safe = np.where(cn < EPS_NORM, 1.0, cn)

        g_eh = grad_xhat - g_e
        if grad_ehat is not None:
            g_eh = g_eh + grad_ehat[l]

        # mixing: ehat = sum_j renorm_j * c_j over the selected set
        mix = np.zeros((B, M))
        np.put_along_axis(mix, idx, renorm, axis=1)
        grad_c[l] += mix.T @ g_eh
        g_wr = np.take_along_axis(g_eh @ C[l].T, idx, axis=1)

        # renormalization: wr_j = w_j / mass, gradient only inside the mask
        dot_wr = (g_wr * renorm).sum(axis=1)
        g_w_sel = (g_wr - dot_wr[:, None]) / mass[:, None]
        g_w = np.zeros((B, M))
        np.put_along_axis(g_w, idx, g_w_sel, axis=1)

        # softmax
        g_s = w * (g_w - (g_w * w).sum(axis=1, keepdims=True))
        # cosine scores were clamped to the constant 0 at degenerate norms
        g_s[un < EPS_NORM, :] = 0.0
        g_s[:, cn < EPS_NORM] = 0.0

        # scores: s_bk = (u_b . c_k) / (|u_b| |c_k|)
        gs_s_row = (g_s * s).sum(axis=1)
        g_u = (g_s / cn_safe[None, :]) @ C[l] / un_safe[:, None] \
            - (gs_s_row / un_safe**2)[:, None] * u
        gs_s_col = (g_s * s).sum(axis=0)
        grad_c[l] += ((g_s / un_safe[:, None]).T @ u) / cn_safe[:, None] \
            - (gs_s_col / cn_safe**2)[:, None] * C[l]

        g_e = g_e + g_u

    g_e0 = g_e
    if ref is None:
        return None, grad_c, g_e0.copy()

    r = np.asarray(ref, dtype=np.float64)
    rr = float(r @ r)
    # alpha receives grad_xhat through the alpha*r term and -g_e0 through e0
    g_alpha = grad_xhat @ r - g_e0 @ r
    grad_r = fwd.alpha @ grad_xhat - fwd.alpha @ g_e0 \
        + (g_alpha @ fwd.x - 2.0 * (g_alpha * fwd.alpha).sum() * r) / rr
    grad_x = g_e0 + g_alpha[:, None] * r / rr
    return grad_r, grad_c, grad_x


def rate(residual, codebook: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Cosine scores of a residual against every codeword, plus their softmax.

    A zero residual yields all-zero scores and uniform weights.
    """
    u = np.asarray(residual, dtype=np.float64)
    C = np.asarray(codebook.codewords, dtype=np.float64)
    if u.shape[0] != C.shape[1]:
        raise ValueError(f"dimension mismatch: residual {u.shape[0]} vs codebook {C.shape[1]}")
    un = np.linalg.norm(u)
    cn = np.linalg.norm(C, axis=1)
    cn_safe = np.where(cn < EPS_NORM, 1.0, cn)
    if un < EPS_NORM:
        scores = np.zeros(C.shape[0])
    else:
        scores = C @ u / (un * cn_safe)
        scores[cn < EPS_NORM] = 0.0
    weights = softmax_rows(scores[None, :])[0]
    return scores, weights


def quantize_layer(residual, codebook: Codebook, top_k: int) -> LayerTrace:
    """One layer of quantization: rate, select top-K, mix, subtract."""
    M = codebook.codewords.shape[0]
    if not 1 <= top_k <= M:
        raise ValueError(f"top_k must be in [1, {M}], got {top_k}")
    u = np.asarray(residual, dtype=np.float64)
    scores, weights = rate(u, codebook)
    order = np.argsort(-weights, kind="stable")
    idx = order[:top_k]
    picked = weights[idx]
    renorm = picked / picked.sum()
    C = np.asarray(codebook.codewords, dtype=np.float64)
    quantized = renorm @ C[idx]
    return LayerTrace(
        input_residual=u,
        scores=scores,
        weights=weights,
        selected_indices=idx,
        renormalized_weights=renorm,
        quantized=quantized,
        output_residual=u - quantized,
    )


def quantize_full(x, params: ModelParams) -> QuantizationTrace:
    """Project then quantize through all layers, recording every intermediate."""
    xv = np.asarray(x, dtype=np.float64)
    if xv.shape[0] != params.dim:
        raise ValueError(f"dimension mismatch: x {xv.shape[0]} vs model {params.dim}")
    if params.ref is not None and np.linalg.norm(params.ref) < EPS_NORM:
        from .projection import DegenerateParameterError

        raise DegenerateParameterError("reference vector norm below EPS_NORM")
    fwd = _forward_batch(xv[None, :], params.ref, params.codebooks, params.top_k)
    layers = [
        LayerTrace(
            input_residual=fwd.residuals[l][0],
            scores=fwd.scores[l, 0],
            weights=fwd.weights[l, 0],
            selected_indices=fwd.sel_idx[l, 0],
            renormalized_weights=fwd.sel_weights[l, 0],
            quantized=fwd.ehat[l, 0],
            output_residual=fwd.residuals[l + 1][0],
        )
        for l in range(params.num_layers)
    ]
    proj = ProjectionResult(alpha=float(fwd.alpha[0]), residual=fwd.residuals[0][0])
    return QuantizationTrace(projection=proj, layers=layers, sid=fwd.sids[0])


def _batch_from_traces(traces, params: ModelParams) -> BatchForward:
    """Re-pack per-item traces into the batched layout for the backward kernel."""
    L, M, d = params.codebooks.shape
    B = len(traces)
    K = len(traces[0].layers[0].selected_indices)
    C = np.asarray(params.codebooks, dtype=np.float64)
    r = None if params.ref is None else np.asarray(params.ref, dtype=np.float64)

    alpha = np.array([t.projection.alpha for t in traces])
    e0 = np.stack([t.projection.residual for t in traces])
    x = e0 if r is None else e0 + alpha[:, None] * r
    residuals = [e0]
    scores = np.empty((L, B, M))
    weights = np.empty((L, B, M))
    sel_idx = np.empty((L, B, K), dtype=np.int64)
    sel_weights = np.empty((L, B, K))
    sel_sums = np.empty((L, B))
    ehat = np.empty((L, B, d))
    sids = np.stack([np.asarray(t.sid, dtype=np.int64) for t in traces])
    for l in range(L):
        for b, t in enumerate(traces):
            lt = t.layers[l]
            scores[l, b] = lt.scores
            weights[l, b] = lt.weights
            sel_idx[l, b] = lt.selected_indices
            sel_weights[l, b] = lt.renormalized_weights
            sel_sums[l, b] = lt.weights[lt.selected_indices].sum()
            ehat[l, b] = lt.quantized
        residuals.append(np.stack([t.layers[l].output_residual for t in traces]))
    res_norms = np.stack([np.linalg.norm(residuals[l], axis=1) for l in range(L)])
    cw_norms = np.stack([np.linalg.norm(C[l], axis=1) for l in range(L)])
    return BatchForward(
        x=x, alpha=alpha, residuals=residuals, scores=scores, weights=weights,
        sel_idx=sel_idx, sel_weights=sel_weights, sel_sums=sel_sums, ehat=ehat,
        sids=sids, res_norms=res_norms, cw_norms=cw_norms,
    )


def quantize_backward(trace: QuantizationTrace, params: ModelParams,
                      grad_recon, aux_grads=None) -> ParamGrads:
    """Gradients of a scalar loss with respect to r and every codeword.

    grad_recon is the incoming gradient on the reconstruction
    alpha*r + sum_l ehat^(l); aux_grads, when given, holds one extra (d,)
    gradient per layer applied directly to that layer's ehat (used by the
    cohesion regularizer).
    """
    L, M, d = params.codebooks.shape
    if len(trace.layers) != L:
        raise ValueError(f"trace has {len(trace.layers)} layers, params has {L}")
    if trace.layers[0].weights.shape[0] != M:
        raise ValueError(
            f"trace codebook size {trace.layers[0].weights.shape[0]} vs params {M}"
        )
    if trace.projection.residual.shape[0] != d:
        raise ValueError(
            f"trace dim {trace.projection.residual.shape[0]} vs params {d}"
        )
    g_xhat = np.asarray(grad_recon, dtype=np.float64)[None, :]
    g_ehat = None
    if aux_grads is not None:
        if len(aux_grads) != L:
            raise ValueError(f"aux_grads must have {L} entries, got {len(aux_grads)}")
        g_ehat = np.stack([np.asarray(g, dtype=np.float64) for g in aux_grads])[:, None, :]
    fwd = _batch_from_traces([trace], params)
    grad_r, grad_c, _ = _backward_batch(fwd, params.ref, params.codebooks, g_xhat, g_ehat)
    return ParamGrads(ref=grad_r, codebooks=grad_c)


def init_codebooks(dataset, ref, config: QuantizerConfig, seed: int,
                   init_mode: str = "kmeans", assign_rule: str = "rating") -> list:
    """Build the L initial codebooks from a dataset's initial residuals.

    kmeans mode clusters the residuals layer by layer, chaining items through
    the already-built layers with hard assignments (`assign_rule` picks the
    cosine rating argmax or the Euclidean nearest codeword). random mode draws
    codewords from a zero-mean Gaussian whose per-dimension stddev matches the
    initial residuals.
    """
    from .baselines import kmeans

    if init_mode not in ("kmeans", "random"):
        raise ValueError(f"unknown init_mode {init_mode!r}")
    if assign_rule not in ("rating", "euclid"):
        raise ValueError(f"unknown assign_rule {assign_rule!r}")
    X = np.asarray(dataset.matrix, dtype=np.float64)
    n = X.shape[0]
    L, M, d = config.num_layers, config.codebook_size, config.embedding_dim
    if n == 0:
        raise ValueError("cannot initialize codebooks from an empty dataset")
    if n < M:
        logger.warning("dataset has %d items but codebooks need %d centroids", n, M)

    if ref is None:
        e = X.copy()
    else:
        r = np.asarray(ref, dtype=np.float64)
        e = X - (X @ r / (r @ r))[:, None] * r

    rng = np.random.default_rng(seed)
    books = np.empty((L, M, d), dtype=np.float64)
    if init_mode == "random":
        std = e.std(axis=0)
        std = np.where(std < EPS_NORM, 1.0, std)
        books = rng.normal(size=(L, M, d)) * std
    else:
        for l in range(L):
            result = kmeans(e, M, seed=(seed * 1_000_003 + l + 1) % 2**31)
            books[l] = np.asarray(result.centroids, dtype=np.float64)
            if l + 1 < L:
                if assign_rule == "rating":
                    un = np.linalg.norm(e, axis=1)
                    cn = np.linalg.norm(books[l], axis=1)
                    un_s = np.where(un < EPS_NORM, 1.0, un)
                    cn_s = np.where(cn < EPS_NORM, 1.0, cn)
                    cos = (e @ books[l].T) / (un_s[:, None] * cn_s[None, :])
                    cos[un < EPS_NORM, :] = 0.0
                    cos[:, cn < EPS_NORM] = 0.0
                    idx = cos.argmax(axis=1)
                else:
                    idx = _dist2(e, books[l]).argmin(axis=1)
                e = e - books[l][idx]

    # codewords must be usable under cosine rating: re-seed (near) zero norms
    norms = np.linalg.norm(books, axis=2)
    dead = norms < EPS_NORM
    if dead.any():
        books[dead] = rng.normal(size=(int(dead.sum()), d)) * 1e-3
    return [Codebook(l + 1, books[l].astype(np.float32)) for l in range(L)]


def _dist2(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (n, k), clipped at zero."""
    d2 = (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * points @ centers.T
        + (centers * centers).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _soft_sids_chunk(X: np.ndarray, ref, C: np.ndarray, top_k: int,
                     want_embeddings: bool = False):
    """Lean forward pass for SID emission: no trace storage beyond one layer."""
    L = C.shape[0]
    B = X.shape[0]
    if ref is None:
        e = X.copy()
    else:
        r = np.asarray(ref, dtype=np.float64)
        e = X - (X @ r / (r @ r))[:, None] * r
    sids = np.empty((B, L), dtype=np.int64)
    q = np.zeros_like(X) if want_embeddings else None
    for l in range(L):
        un = np.linalg.norm(e, axis=1)
        cn = np.linalg.norm(C[l], axis=1)
        un_s = np.where(un < EPS_NORM, 1.0, un)
        cn_s = np.where(cn < EPS_NORM, 1.0, cn)
        s = (e @ C[l].T) / (un_s[:, None] * cn_s[None, :])
        s[un < EPS_NORM, :] = 0.0
        s[:, cn < EPS_NORM] = 0.0
        w = softmax_rows(s)
        order = np.argsort(-w, axis=1, kind="stable")
        idx = order[:, :top_k]
        picked = np.take_along_axis(w, idx, axis=1)
        renorm = picked / picked.sum(axis=1, keepdims=True)
        mix = np.zeros_like(w)
        np.put_along_axis(mix, idx, renorm, axis=1)
        eh = mix @ C[l]
        sids[:, l] = idx[:, 0]
        if want_embeddings:
            q += eh
        e = e - eh
    return sids, q


def _hard_sids_chunk(X: np.ndarray, C: np.ndarray, want_embeddings: bool = False):
    """Nearest-Euclidean residual chain used by the STE and K-Means methods."""
    L = C.shape[0]
    B = X.shape[0]
    e = X.copy()
    sids = np.empty((B, L), dtype=np.int64)
    q = np.zeros_like(X) if want_embeddings else None
    for l in range(L):
        idx = _dist2(e, C[l]).argmin(axis=1)
        cw = C[l][idx]
        sids[:, l] = idx
        if want_embeddings:
            q += cw
        e = e - cw
    return sids, q


def _emit(dataset, params: ModelParams, want_embeddings: bool, chunk: int = 4096):
    X = np.asarray(dataset.matrix, dtype=np.float64)
    if X.shape[0] > 0 and X.shape[1] != params.dim:
        raise ValueError(f"dimension mismatch: embeddings d={X.shape[1]} vs model d={params.dim}")
    C = np.asarray(params.codebooks, dtype=np.float64)
    all_sids = []
    all_q = [] if want_embeddings else None
    for start in range(0, X.shape[0], chunk):
        Xc = X[start:start + chunk]
        if params.method == "r3":
            sids, q = _soft_sids_chunk(Xc, params.ref, C, params.top_k, want_embeddings)
        else:
            sids, q = _hard_sids_chunk(Xc, C, want_embeddings)
        all_sids.append(sids)
        if want_embeddings:
            all_q.append(q)
    sids = np.concatenate(all_sids) if all_sids else np.empty((0, params.num_layers), dtype=np.int64)
    q = None
    if want_embeddings:
        q = np.concatenate(all_q) if all_q else np.empty((0, params.dim))
    return sids, q


def emit_sids(dataset, params: ModelParams):
    """SID table for a dataset: one L-tuple of codeword indices per item."""
    from .dataio import SidTable

    sids, _ = _emit(dataset, params, want_embeddings=False)
    return SidTable(item_ids=list(dataset.item_ids), codes=sids,
                    codebook_size=params.codebook_size)


def quantized_embeddings(dataset, params: ModelParams) -> np.ndarray:
    """Per-item cumulative quantized embedding sum_l ehat^(l).

    Soft mixture over the full codebook for the rating method, hard codeword
    sum for everything else.
    """
    eval_params = params
    if params.method == "r3" and params.top_k != params.codebook_size:
        eval_params = ModelParams(method=params.method, ref=params.ref,
                                  codebooks=params.codebooks,
                                  top_k=params.codebook_size)
    _, q = _emit(dataset, eval_params, want_embeddings=True)
    return q


def initial_residuals(dataset, params: ModelParams) -> np.ndarray:
    """e^(0) for every item (equals x when the model has no reference vector)."""
    X = np.asarray(dataset.matrix, dtype=np.float64)
    if params.ref is None:
        return X
    r = np.asarray(params.ref, dtype=np.float64)
    return X - (X @ r / (r @ r))[:, None] * r

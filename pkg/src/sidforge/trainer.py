"""End-to-end training loop.

Handles batching with a per-epoch deterministic shuffle, loss and gradient
orchestration for the rating quantizer and the STE baselines, periodic
codebook-usage tracking on a fixed evaluation subsample, checkpointing, and
training-curve logging.
"""

import json
import logging
import struct
import time
from dataclasses import dataclass, replace

import numpy as np

from . import baselines
from .dataio import FormatError
from .losses import _loss_grads_batch
from .numerics import EPS_NORM, softmax_rows
from .optimizer import AdamWState, adamw_step, init_adamw
from .projection import init_reference
from .quantizer import (
    ModelParams,
    QuantizerConfig,
    _forward_batch,
    _hard_sids_chunk,
    _soft_sids_chunk,
    init_codebooks,
)

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"SIDC"
CKPT_VERSION = 1

METHODS = ("r3", "rqvae", "vqvae", "rkmeans", "kmeans")

LOG_HEADER = "step,epoch,loss_rec,loss_sc,loss_pd,loss_total,codebook_usage,wall_ms"


@dataclass
class TrainConfig:
    method: str = "r3"
    epochs: int = 50
    batch_size: int = 256
    seed: int = 42
    lam: float = 0.01  # regularization weight
    t: float = 2.0
    num_layers: int = 2
    codebook_size: int = 64
    top_k: int | None = None  # None means fully soft (K = M)
    lr: float = 5e-4
    weight_decay: float = 1e-5
    init_mode: str = "kmeans"
    log_every: int = 50
    use_ref: bool = True
    commitment_beta: float = 0.25
    revive: bool = False


@dataclass
class TrainLogRow:
    step: int
    epoch: int
    loss_rec: float
    loss_sc: float
    loss_pd: float
    loss_total: float
    codebook_usage: float
    wall_ms: float


def _validate_config(dataset, config: TrainConfig) -> None:
    if config.method not in METHODS:
        raise ValueError(f"unknown method {config.method!r}, expected one of {METHODS}")
    if dataset.num_items == 0:
        raise ValueError("cannot train on an empty dataset")
    for name in ("epochs", "batch_size", "num_layers", "codebook_size", "log_every"):
        if getattr(config, name) < 1:
            raise ValueError(f"{name} must be positive, got {getattr(config, name)}")
    if config.codebook_size < 2:
        raise ValueError(f"codebook_size must be >= 2, got {config.codebook_size}")
    if config.top_k is not None and not 1 <= config.top_k <= config.codebook_size:
        raise ValueError(
            f"top_k must be in [1, {config.codebook_size}], got {config.top_k}"
        )
    if config.lam < 0:
        raise ValueError(f"lam must be >= 0, got {config.lam}")
    if config.t <= 0:
        raise ValueError(f"t must be positive, got {config.t}")
    if config.lam > 0 and config.method == "r3" and config.batch_size < 2:
        raise ValueError("batch_size must be >= 2 when lam > 0 (cohesion needs pairs)")
    if config.init_mode not in ("kmeans", "random"):
        raise ValueError(f"unknown init_mode {config.init_mode!r}")


def _usage_from_codes(codes: np.ndarray, m: int) -> float:
    per_layer = [np.unique(codes[:, l]).size / m for l in range(codes.shape[1])]
    return float(np.mean(per_layer))


def _subsample_usage(sub_x: np.ndarray, params: ModelParams) -> tuple[float, np.ndarray]:
    if params.method == "r3":
        codes, _ = _soft_sids_chunk(sub_x, None if params.ref is None else
                                    np.asarray(params.ref, dtype=np.float64),
                                    np.asarray(params.codebooks, dtype=np.float64),
                                    params.top_k)
    else:
        codes, _ = _hard_sids_chunk(sub_x, np.asarray(params.codebooks, dtype=np.float64))
    return _usage_from_codes(codes, params.codebook_size), codes


def _fit_kmeans_family(dataset, config: TrainConfig, t_start: float):
    if config.method == "kmeans":
        params, table = baselines.residual_kmeans(dataset, replace(config, num_layers=1))
        params = ModelParams(method="kmeans", ref=None, codebooks=params.codebooks, top_k=1)
    else:
        params, table = baselines.residual_kmeans(dataset, config)
    X = np.asarray(dataset.matrix, dtype=np.float64)
    recon = np.zeros_like(X)
    for l in range(params.num_layers):
        recon += np.asarray(params.codebooks[l], dtype=np.float64)[table.codes[:, l]]
    rec = float(((X - recon) ** 2).sum(axis=1).mean())
    usage = _usage_from_codes(table.codes, params.codebook_size)
    row = TrainLogRow(step=0, epoch=0, loss_rec=rec, loss_sc=0.0, loss_pd=0.0,
                      loss_total=rec, codebook_usage=usage,
                      wall_ms=(time.perf_counter() - t_start) * 1000.0)
    return params, [row]


def train(dataset, config: TrainConfig, with_state: bool = False):
    """Train (or fit) the configured method, returning (params, log rows).

    with_state=True appends the final optimizer state (None for the
    fit-style K-Means methods) so callers can checkpoint a resumable run.
    """
    _validate_config(dataset, config)
    t_start = time.perf_counter()
    if config.method in ("kmeans", "rkmeans"):
        params, rows = _fit_kmeans_family(dataset, config, t_start)
        return (params, rows, None) if with_state else (params, rows)

    X = np.asarray(dataset.matrix, dtype=np.float64)
    n, dim = X.shape
    num_layers = 1 if config.method == "vqvae" else config.num_layers
    m = config.codebook_size
    top_k = config.top_k if config.top_k is not None else m
    if not 1 <= top_k <= m:
        raise ValueError(f"top_k must be in [1, {m}], got {top_k}")

    is_r3 = config.method == "r3"
    ref = init_reference(dataset.matrix, seed=config.seed) if (is_r3 and config.use_ref) else None
    qconfig = QuantizerConfig(num_layers=num_layers, codebook_size=m,
                              top_k=top_k, embedding_dim=dim)
    books = init_codebooks(dataset, ref, qconfig, config.seed,
                           init_mode=config.init_mode,
                           assign_rule="rating" if is_r3 else "euclid")
    params = ModelParams(
        method=config.method,
        ref=None if ref is None else np.asarray(ref, dtype=np.float32),
        codebooks=np.stack([b.codewords for b in books]).astype(np.float32),
        top_k=top_k,
    )

    opt_params = {"codebooks": params.codebooks}
    if params.ref is not None:
        opt_params["ref"] = params.ref
    state = init_adamw(opt_params, lr=config.lr, weight_decay=config.weight_decay)

    sub_idx = np.random.default_rng(config.seed).choice(n, size=min(n, 4096), replace=False)
    sub_x = X[sub_idx]

    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    rows = []
    step = 0
    epoch_codes_seen = None
    for epoch in range(config.epochs):
        perm = np.random.default_rng((config.seed, epoch)).permutation(n)
        if config.revive:
            epoch_codes_seen = np.zeros((num_layers, m), dtype=bool)
        for start in range(0, n, config.batch_size):
            step += 1
            batch = perm[start:start + config.batch_size]
            xb = X[batch]
            if is_r3:
                fwd = _forward_batch(xb, params.ref, params.codebooks, top_k)
                grad_ref, grad_c, breakdown = _loss_grads_batch(fwd, params, config.lam, config.t)
                grads = {"codebooks": grad_c}
                if params.ref is not None:
                    grads["ref"] = grad_ref
                loss_rec, loss_sc, loss_pd, loss_total = (
                    breakdown.rec, breakdown.sc_term, breakdown.pd_term, breakdown.total
                )
                batch_codes = fwd.sids
            else:
                idxs, rec, _cb, total, grad_c = baselines.ste_losses_and_grads(
                    xb, params.codebooks, config.commitment_beta
                )
                grads = {"codebooks": grad_c}
                loss_rec, loss_sc, loss_pd, loss_total = rec, 0.0, 0.0, total
                batch_codes = idxs.T
            adamw_step(opt_params, grads, state)

            if params.ref is not None and np.linalg.norm(params.ref) < EPS_NORM:
                logger.warning("reference vector collapsed at step %d, re-initializing", step)
                params.ref[...] = init_reference(dataset.matrix, seed=config.seed)

            if config.revive:
                for l in range(num_layers):
                    epoch_codes_seen[l][np.unique(batch_codes[:, l])] = True

            if step % config.log_every == 0 or step == total_steps:
                usage, _ = _subsample_usage(sub_x, params)
                rows.append(TrainLogRow(
                    step=step, epoch=epoch, loss_rec=float(loss_rec),
                    loss_sc=float(loss_sc), loss_pd=float(loss_pd),
                    loss_total=float(loss_total), codebook_usage=usage,
                    wall_ms=(time.perf_counter() - t_start) * 1000.0,
                ))
        if config.revive:
            _revive_dead_codewords(params, epoch_codes_seen, X, config.seed, epoch)
    return (params, rows, state) if with_state else (params, rows)


def _revive_dead_codewords(params: ModelParams, seen: np.ndarray, X: np.ndarray,
                           seed: int, epoch: int) -> None:
    """Reseed codewords that went a full epoch without being any item's argmax.

    Replacement vectors are residuals of a random item sample at the dead
    codeword's layer, computed with the current parameters.
    """
    from .quantizer import _dist2

    rng = np.random.default_rng((seed, epoch, 7))
    sample = X[rng.choice(X.shape[0], size=min(X.shape[0], 1024), replace=False)]
    e = sample.copy()
    if params.method == "r3" and params.ref is not None:
        r = np.asarray(params.ref, dtype=np.float64)
        e = sample - (sample @ r / (r @ r))[:, None] * r
    C = np.asarray(params.codebooks, dtype=np.float64)
    for l in range(params.num_layers):
        dead = np.flatnonzero(~seen[l])
        if dead.size:
            picks = rng.choice(e.shape[0], size=dead.size, replace=dead.size > e.shape[0])
            params.codebooks[l][dead] = e[picks].astype(np.float32)
            logger.info("revived %d codewords in layer %d after epoch", dead.size, l + 1)
        if params.method == "r3":
            un = np.linalg.norm(e, axis=1)
            cn = np.linalg.norm(C[l], axis=1)
            un_s = np.where(un < EPS_NORM, 1.0, un)
            cn_s = np.where(cn < EPS_NORM, 1.0, cn)
            s = (e @ C[l].T) / (un_s[:, None] * cn_s[None, :])
            s[un < EPS_NORM, :] = 0.0
            s[:, cn < EPS_NORM] = 0.0
            w = softmax_rows(s)
            mix = w / w.sum(axis=1, keepdims=True)
            e = e - mix @ C[l]
        else:
            idx = _dist2(e, C[l]).argmin(axis=1)
            e = e - C[l][idx]


def write_train_log(rows, path) -> None:
    """Training log CSV with the pinned header."""
    with open(str(path), "w", encoding="utf-8", newline="\n") as f:
        f.write(LOG_HEADER + "\n")
        for r in rows:
            f.write(
                f"{r.step},{r.epoch},{r.loss_rec!r},{r.loss_sc!r},{r.loss_pd!r},"
                f"{r.loss_total!r},{r.codebook_usage!r},{r.wall_ms:.3f}\n"
            )


def _array_records(params: ModelParams, state: AdamWState | None):
    records = [("codebooks", params.codebooks.astype("<f4"))]
    if params.ref is not None:
        records.append(("ref", params.ref.astype("<f4")))
    if state is not None:
        for name in sorted(state.first_moment):
            records.append((f"m1.{name}", state.first_moment[name].astype("<f8")))
            records.append((f"m2.{name}", state.second_moment[name].astype("<f8")))
    return records


def checkpoint_save(params: ModelParams, state: AdamWState | None, path) -> None:
    """Binary checkpoint: magic, version byte, JSON header, raw arrays."""
    records = _array_records(params, state)
    header = {
        "method": params.method,
        "top_k": params.top_k,
        "num_layers": params.num_layers,
        "codebook_size": params.codebook_size,
        "dim": params.dim,
        "has_ref": params.ref is not None,
        "optimizer": None if state is None else {
            "lr": state.lr, "weight_decay": state.weight_decay,
            "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            "step": state.step,
        },
        "arrays": [
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
            for name, arr in records
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(str(path), "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<B", CKPT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for _, arr in records:
            f.write(arr.tobytes(order="C"))


def checkpoint_load(path):
    """Load a checkpoint, returning (ModelParams, AdamWState or None)."""
    path = str(path)
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 9:
        raise FormatError(f"{path}: length {len(blob)} too short for the fixed header")
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {CKPT_MAGIC!r}")
    version = blob[4]
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {CKPT_VERSION}")
    (header_len,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + header_len:
        raise FormatError(f"{path}: header length field says {header_len}, file truncated")
    try:
        header = json.loads(blob[9:9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from exc

    offset = 9 + header_len
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * np.dtype(spec["dtype"]).itemsize
        if offset + nbytes > len(blob):
            raise FormatError(
                f"{path}: array {spec['name']!r} truncated "
                f"(need {nbytes} bytes at offset {offset}, have {len(blob) - offset})"
            )
        arrays[spec["name"]] = np.frombuffer(
            blob, dtype=spec["dtype"], count=count, offset=offset
        ).reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after arrays")

    for key in ("method", "top_k", "has_ref", "num_layers", "codebook_size", "dim"):
        if key not in header:
            raise FormatError(f"{path}: header missing field {key!r}")
    codebooks = arrays.get("codebooks")
    if codebooks is None:
        raise FormatError(f"{path}: missing codebooks array")
    expected_shape = (header["num_layers"], header["codebook_size"], header["dim"])
    if tuple(codebooks.shape) != expected_shape:
        raise FormatError(
            f"{path}: codebooks shape {tuple(codebooks.shape)} vs header {expected_shape}"
        )
    ref = arrays.get("ref") if header["has_ref"] else None
    if header["has_ref"] and ref is None:
        raise FormatError(f"{path}: header says has_ref but the ref array is missing")
    params = ModelParams(method=header["method"], ref=ref, codebooks=codebooks,
                         top_k=header["top_k"])
    state = None
    if header["optimizer"] is not None:
        opt = header["optimizer"]
        state = AdamWState(lr=opt["lr"], weight_decay=opt["weight_decay"],
                           beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
                           step=opt["step"])
        for name, arr in arrays.items():
            if name.startswith("m1."):
                state.first_moment[name[3:]] = arr
            elif name.startswith("m2."):
                state.second_moment[name[3:]] = arr
    return params, state

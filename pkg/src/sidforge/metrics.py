"""Offline SID quality evaluation.

Covers the cohesion and discrimination scores, collision rate, the Gini
coefficient of codeword load, per-layer codebook usage, Spearman rank
correlation, and the CSV exports behind the qualitative projection figures.
Metrics that cannot be computed (no qualifying cluster, fewer than two
clusters, constant rank input) are reported as an explicit undefined status,
never silently as 0.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataio import EmbeddingDataset, SidTable
from .numerics import EPS_NORM, pca_project

logger = logging.getLogger(__name__)

CLUSTER_KEYS = ("level1", "full_sid")
EMBEDDING_SOURCES = ("soft_quantized", "raw", "initial_residual")
DEFAULT_MAX_PAIRS = 1_000_000


@dataclass
class ClusterAssignment:
    cluster_by: str
    groups: dict  # cluster key -> np.ndarray of member item indices


@dataclass
class MetricsReport:
    sc: float | None
    pd: float | None
    collision_rate: float
    gini: float
    usage_per_layer: list
    cluster_by: str
    embedding_source: str
    t: float
    undefined_flags: list = field(default_factory=list)
    pd_sampling: bool = False


def build_clusters(sids: SidTable, cluster_by: str = "level1") -> ClusterAssignment:
    """Group item indices by their level-1 code or by the full SID tuple."""
    if cluster_by not in CLUSTER_KEYS:
        raise ValueError(f"unknown cluster key {cluster_by!r}, expected one of {CLUSTER_KEYS}")
    groups = {}
    if cluster_by == "level1":
        keys = sids.codes[:, 0]
        for code in np.unique(keys):
            groups[int(code)] = np.flatnonzero(keys == code)
    else:
        seen = {}
        for i, row in enumerate(sids.codes):
            seen.setdefault(tuple(int(c) for c in row), []).append(i)
        groups = {k: np.array(v, dtype=np.int64) for k, v in seen.items()}
    return ClusterAssignment(cluster_by=cluster_by, groups=groups)


def _normalized(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms < EPS_NORM, 1.0, norms)
    unit = vectors / safe[:, None]
    unit[norms < EPS_NORM] = 0.0
    return unit


def eval_sc(embeddings: np.ndarray, clusters: ClusterAssignment) -> float | None:
    """Mean over clusters of the mean pairwise cosine inside each cluster.

    Clusters of size 1 are excluded; returns None when none qualifies.
    """
    unit = _normalized(np.asarray(embeddings, dtype=np.float64))
    values = []
    skipped = 0
    for members in clusters.groups.values():
        n = members.size
        if n < 2:
            skipped += 1
            continue
        block = unit[members]
        total = block.sum(axis=0)
        pair_sum = (float(total @ total) - float((block * block).sum())) / 2.0
        values.append(pair_sum * 2.0 / (n * n - n))
    if skipped:
        logger.debug("eval_sc: skipped %d singleton clusters", skipped)
    if not values:
        return None
    return float(np.mean(values))


def eval_pd(embeddings: np.ndarray, clusters: ClusterAssignment, t: float = 2.0,
            max_pairs: int = DEFAULT_MAX_PAIRS, seed: int = 0) -> float | None:
    """Log-mean exponentiated negative cosine distance between cluster centroids.

    When the number of centroid pairs exceeds max_pairs, a seeded uniform
    sample of max_pairs pairs is used instead of the full sum.
    """
    if t <= 0:
        raise ValueError(f"t must be positive, got {t}")
    emb = np.asarray(embeddings, dtype=np.float64)
    keys = sorted(clusters.groups, key=repr)
    if len(keys) < 2:
        return None
    centroids = np.stack([emb[clusters.groups[k]].mean(axis=0) for k in keys])
    g = centroids.shape[0]
    unit = _normalized(centroids)
    n_pairs = g * (g - 1) // 2
    # 1 - cos computed as the half squared chord: cancellation-free, and
    # exactly zero for bit-identical centroids
    if n_pairs <= max_pairs:
        total = 0.0
        for a in range(g - 1):
            d2 = ((unit[a + 1:] - unit[a]) ** 2).sum(axis=1)
            total += float(np.exp(-t * d2 / 2.0).sum())
        return float(np.log(total / n_pairs))
    rng = np.random.default_rng(seed)
    total = 0.0
    remaining = max_pairs
    while remaining > 0:
        chunk = min(remaining, 262_144)
        a = rng.integers(g, size=chunk)
        b = rng.integers(g, size=chunk)
        clash = a == b
        while clash.any():
            b[clash] = rng.integers(g, size=int(clash.sum()))
            clash = a == b
        d2 = ((unit[a] - unit[b]) ** 2).sum(axis=1)
        total += float(np.exp(-t * d2 / 2.0).sum())
        remaining -= chunk
    return float(np.log(total / max_pairs))


def pd_pair_count(clusters: ClusterAssignment) -> int:
    g = len(clusters.groups)
    return g * (g - 1) // 2


def collision_rate(sids: SidTable) -> float:
    """Items per distinct full SID (1.0 means every item has a unique SID)."""
    if sids.codes.shape[0] == 0:
        raise ValueError("collision_rate of an empty SID table is undefined")
    distinct = np.unique(sids.codes, axis=0).shape[0]
    return sids.codes.shape[0] / distinct


def gini(sids: SidTable, codebook_size: int) -> float:
    """Mean over layers of the Gini coefficient of per-codeword item counts.

    All codebook slots participate, so dead codewords increase imbalance.
    """
    if sids.codes.shape[0] == 0:
        raise ValueError("gini of an empty SID table is undefined")
    m = codebook_size
    values = []
    for l in range(sids.num_layers):
        counts = np.bincount(sids.codes[:, l], minlength=m).astype(np.float64)
        counts.sort()
        idx = np.arange(1, m + 1)
        # sum_{i,j} |n_i - n_j| / (2 M^2 mean) via the sorted-counts identity
        values.append(float(((2 * idx - m - 1) * counts).sum() / (m * counts.sum())))
    return float(np.mean(values))


def codebook_usage(sids: SidTable, codebook_size: int) -> list:
    """Per-layer fraction of codewords used by at least one item."""
    if sids.codes.shape[0] == 0:
        raise ValueError("codebook_usage of an empty SID table is undefined")
    return [float(np.unique(sids.codes[:, l]).size / codebook_size)
            for l in range(sids.num_layers)]


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float | None:
    """Spearman rank correlation with mid-rank tie handling.

    Returns None when either input has zero rank variance.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError(f"inputs must be equal-length 1-D sequences, got {x.shape} vs {y.shape}")
    if x.shape[0] < 3:
        raise ValueError(f"need at least 3 observations, got {x.shape[0]}")
    rx = _midranks(x)
    ry = _midranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sx = float(dx @ dx)
    sy = float(dy @ dy)
    if sx <= 0.0 or sy <= 0.0:
        return None
    return float(dx @ dy) / float(np.sqrt(sx * sy))


def export_projection(dataset: EmbeddingDataset, out_path, mode: str):
    """Write a low-dimensional projection of the dataset for plotting.

    pca3 writes id,x,y,z; ring2 projects to two dimensions, pushes each point
    to the unit circle and writes id,x,y,angle_rad.
    """
    if mode not in ("pca3", "ring2"):
        raise ValueError(f"unknown projection mode {mode!r}")
    if dataset.num_items < 3:
        raise ValueError(f"need at least 3 points to project, got {dataset.num_items}")
    out_path = str(out_path)
    try:
        if mode == "pca3":
            dims = min(3, dataset.dim)
            coords = np.zeros((dataset.num_items, 3), dtype=np.float64)
            coords[:, :dims] = pca_project(dataset.matrix, dims)
            with open(out_path, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["id", "x", "y", "z"])
                for item_id, (px, py, pz) in zip(dataset.item_ids, coords):
                    writer.writerow([item_id, f"{px:.6g}", f"{py:.6g}", f"{pz:.6g}"])
        else:
            dims = min(2, dataset.dim)
            coords = np.zeros((dataset.num_items, 2), dtype=np.float64)
            coords[:, :dims] = pca_project(dataset.matrix, dims)
            unit = _normalized(coords)
            angles = np.arctan2(unit[:, 1], unit[:, 0])
            with open(out_path, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["id", "x", "y", "angle_rad"])
                for item_id, (px, py), ang in zip(dataset.item_ids, unit, angles):
                    writer.writerow([item_id, f"{px:.6g}", f"{py:.6g}", f"{ang:.6g}"])
    except OSError as exc:
        raise OSError(f"cannot write projection to {out_path}: {exc}") from exc
    return out_path


def _check_report(report: MetricsReport) -> None:
    if report.sc is not None and not -1.0 - 1e-9 <= report.sc <= 1.0 + 1e-9:
        raise AssertionError(f"sc {report.sc} outside [-1, 1]")
    if report.pd is not None and not -2.0 * report.t - 1e-9 <= report.pd <= 1e-9:
        raise AssertionError(f"pd {report.pd} outside [-2t, 0]")
    if report.collision_rate < 1.0 - 1e-12:
        raise AssertionError(f"collision_rate {report.collision_rate} below 1")
    if not 0.0 <= report.gini < 1.0:
        raise AssertionError(f"gini {report.gini} outside [0, 1)")
    for u in report.usage_per_layer:
        if not 0.0 <= u <= 1.0:
            raise AssertionError(f"usage {u} outside [0, 1]")


def evaluate_sids(sids: SidTable, embeddings: np.ndarray, codebook_size: int,
                  cluster_by: str = "level1", embedding_source: str = "soft_quantized",
                  t: float = 2.0, max_pairs: int = DEFAULT_MAX_PAIRS,
                  pd_seed: int = 0) -> MetricsReport:
    """Full quality report for one SID assignment over one embedding set."""
    clusters = build_clusters(sids, cluster_by)
    undefined = []
    sc = eval_sc(embeddings, clusters)
    if sc is None:
        undefined.append("sc")
    n_pairs = pd_pair_count(clusters)
    pd_value = eval_pd(embeddings, clusters, t=t, max_pairs=max_pairs, seed=pd_seed)
    if pd_value is None:
        undefined.append("pd")
    report = MetricsReport(
        sc=sc,
        pd=pd_value,
        collision_rate=collision_rate(sids),
        gini=gini(sids, codebook_size),
        usage_per_layer=codebook_usage(sids, codebook_size),
        cluster_by=cluster_by,
        embedding_source=embedding_source,
        t=t,
        undefined_flags=undefined,
        pd_sampling=n_pairs > max_pairs,
    )
    _check_report(report)
    return report

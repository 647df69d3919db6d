"""Dataset ingestion and serialization of SID tables and metric reports.

Formats are the module's contract: the binary embedding format is
little-endian with a 4-byte magic, the SID table is TSV with a header that
pins L and M, and reports are JSON with a fixed key set. Loading never
returns partial state; every structural violation raises FormatError naming
the offending line, offset or field.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

EMB_MAGIC = b"EMB1"


class FormatError(ValueError):
    """A structural problem in a file being read or validated."""


@dataclass
class EmbeddingDataset:
    item_ids: list
    matrix: np.ndarray  # (N, d) float32

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise ValueError(f"matrix must be 2-D, got shape {self.matrix.shape}")
        if len(self.item_ids) != self.matrix.shape[0]:
            raise ValueError(
                f"{len(self.item_ids)} ids for {self.matrix.shape[0]} matrix rows"
            )
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ValueError("item ids are not unique")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("matrix contains NaN or Inf")

    @property
    def num_items(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class SidTable:
    item_ids: list
    codes: np.ndarray  # (N, L) int64
    codebook_size: int

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2:
            raise ValueError(f"codes must be 2-D, got shape {self.codes.shape}")
        if len(self.item_ids) != self.codes.shape[0]:
            raise ValueError(
                f"{len(self.item_ids)} ids for {self.codes.shape[0]} code rows"
            )
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.codebook_size):
            raise ValueError(
                f"codes must lie in [0, {self.codebook_size}), "
                f"got range [{self.codes.min()}, {self.codes.max()}]"
            )

    @property
    def num_layers(self) -> int:
        return self.codes.shape[1]


def save_embeddings(dataset: EmbeddingDataset, path, fmt: str = "bin") -> None:
    path = str(path)
    if fmt == "bin":
        n, d = dataset.matrix.shape
        with open(path, "wb") as f:
            f.write(EMB_MAGIC)
            f.write(struct.pack("<II", n, d))
            f.write(dataset.matrix.astype("<f4").tobytes(order="C"))
        with open(path + ".ids", "w", encoding="utf-8") as f:
            for item_id in dataset.item_ids:
                f.write(item_id + "\n")
    elif fmt == "tsv":
        with open(path, "w", encoding="utf-8") as f:
            for item_id, row in zip(dataset.item_ids, dataset.matrix):
                f.write(item_id + "\t" + ",".join(f"{float(v):.9g}" for v in row) + "\n")
    else:
        raise ValueError(f"unknown embedding format {fmt!r}")


def _load_embeddings_bin(path: str) -> EmbeddingDataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise FormatError(f"{path}: header truncated at {len(blob)} bytes (need 12)")
    if blob[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {EMB_MAGIC!r}")
    n, d = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * n * d
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload length {len(blob)} bytes, expected {expected} for N={n} d={d}"
        )
    matrix = np.frombuffer(blob, dtype="<f4", offset=12).reshape(n, d).copy()
    if not np.all(np.isfinite(matrix)):
        bad = int(np.flatnonzero(~np.isfinite(matrix).all(axis=1))[0])
        raise FormatError(f"{path}: non-finite value in row {bad}")
    ids_path = path + ".ids"
    try:
        with open(ids_path, "r", encoding="utf-8") as f:
            item_ids = [line.rstrip("\n") for line in f]
    except OSError as exc:
        raise FormatError(f"{ids_path}: sidecar ids file unreadable ({exc})") from exc
    if len(item_ids) != n:
        raise FormatError(f"{ids_path}: {len(item_ids)} ids for N={n} rows")
    if len(set(item_ids)) != len(item_ids):
        raise FormatError(f"{ids_path}: duplicate item ids")
    return EmbeddingDataset(item_ids=item_ids, matrix=matrix)


def _load_embeddings_tsv(path: str) -> EmbeddingDataset:
    item_ids = []
    rows = []
    dim = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'id<TAB>floats', got {len(parts)} fields")
            item_id, payload = parts
            try:
                values = np.array([float(v) for v in payload.split(",")], dtype=np.float32)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: unparseable float ({exc})") from exc
            if not np.all(np.isfinite(values)):
                raise FormatError(f"{path}:{lineno}: non-finite value")
            if dim is None:
                dim = values.shape[0]
            elif values.shape[0] != dim:
                raise FormatError(
                    f"{path}:{lineno}: ragged row with {values.shape[0]} values, expected {dim}"
                )
            item_ids.append(item_id)
            rows.append(values)
    if len(set(item_ids)) != len(item_ids):
        dupe = next(i for i in item_ids if item_ids.count(i) > 1)
        raise FormatError(f"{path}: duplicate item id {dupe!r}")
    matrix = np.stack(rows) if rows else np.empty((0, dim or 0), dtype=np.float32)
    return EmbeddingDataset(item_ids=item_ids, matrix=matrix)


def load_embeddings(path, fmt: str = "bin") -> EmbeddingDataset:
    """Read a dataset in the binary or TSV format, validating structure."""
    if fmt == "bin":
        return _load_embeddings_bin(str(path))
    if fmt == "tsv":
        return _load_embeddings_tsv(str(path))
    raise ValueError(f"unknown embedding format {fmt!r}")


def save_sids(table: SidTable, path) -> None:
    """Write a SID table as TSV with the layer/codebook header."""
    with open(str(path), "w", encoding="utf-8", newline="\n") as f:
        f.write(f"#item_id\tcode_1..code_{table.num_layers}\tM={table.codebook_size}\n")
        for item_id, row in zip(table.item_ids, table.codes):
            f.write(item_id + "\t" + "\t".join(str(int(c)) for c in row) + "\n")


def load_sids(path) -> SidTable:
    path = str(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file, expected a header line")
    header = lines[0]
    parts = header.split("\t")
    if len(parts) != 3 or not parts[0] == "#item_id" or not parts[2].startswith("M="):
        raise FormatError(f"{path}:1: malformed header {header!r}")
    try:
        num_layers = int(parts[1].split("..code_")[1])
        codebook_size = int(parts[2][2:])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}:1: malformed header {header!r}") from exc
    item_ids = []
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != num_layers + 1:
            raise FormatError(
                f"{path}:{lineno}: expected {num_layers + 1} fields, got {len(fields)}"
            )
        try:
            codes = [int(c) for c in fields[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: unparseable code ({exc})") from exc
        for c in codes:
            if not 0 <= c < codebook_size:
                raise FormatError(
                    f"{path}:{lineno}: code {c} outside [0, {codebook_size})"
                )
        item_ids.append(fields[0])
        rows.append(codes)
    codes = np.array(rows, dtype=np.int64) if rows else np.empty((0, num_layers), dtype=np.int64)
    return SidTable(item_ids=item_ids, codes=codes, codebook_size=codebook_size)


def _round6(value):
    if value is None:
        return None
    return float(f"{float(value):.6g}")


def save_report(report, path) -> None:
    """Serialize a MetricsReport as JSON (6 significant digits)."""
    payload = {
        "sc": _round6(report.sc),
        "pd": _round6(report.pd),
        "collision_rate": _round6(report.collision_rate),
        "gini": _round6(report.gini),
        "usage_per_layer": [_round6(u) for u in report.usage_per_layer],
        "cluster_by": report.cluster_by,
        "embedding_source": report.embedding_source,
        "t": _round6(report.t),
        "undefined_flags": list(report.undefined_flags),
    }
    if getattr(report, "pd_sampling", False):
        payload["pd_sampling"] = True
    try:
        with open(str(path), "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def load_report(path) -> dict:
    with open(str(path), "r", encoding="utf-8") as f:
        return json.load(f)


def synth_blobs(n: int, dim: int, clusters: int, sep: float, seed: int = 42) -> EmbeddingDataset:
    """Gaussian blob mixture shaped like real item embeddings.

    Cluster centers are drawn at scale `sep` around a common offset direction
    (sep * sqrt(dim) along a seeded axis), mimicking the anisotropic cone that
    trained embedding spaces exhibit; intra-cluster noise is unit isotropic.
    The matrix is scaled to unit mean row norm so training dynamics are
    comparable across sep values.
    """
    if n < 1 or dim < 1 or clusters < 1:
        raise ValueError("n, dim and clusters must all be positive")
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=dim)
    axis /= np.linalg.norm(axis)
    centers = sep * (rng.normal(size=(clusters, dim)) + np.sqrt(dim) * axis)
    labels = rng.integers(clusters, size=n)
    matrix = centers[labels] + rng.normal(size=(n, dim))
    matrix /= np.linalg.norm(matrix, axis=1).mean()
    ids = [f"item_{i:06d}" for i in range(n)]
    return EmbeddingDataset(item_ids=ids, matrix=matrix.astype(np.float32))

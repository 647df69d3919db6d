"""Command-line entry point.

Subcommands: train, encode, eval, compare, correlate, export-proj. Exit codes
are 0 on success, 1 on runtime failure, 2 on usage errors. All defaults match
the training configuration the quantizer was designed around (lambda 0.01,
t 2, lr 5e-4, weight decay 1e-5, kmeans init, seed 42).
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .dataio import (
    EmbeddingDataset,
    FormatError,
    load_embeddings,
    load_sids,
    save_report,
    save_sids,
    synth_blobs,
)
from .quantizer import emit_sids, initial_residuals, quantized_embeddings
from .trainer import (
    METHODS,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    train,
    write_train_log,
)

logger = logging.getLogger(__name__)

# method tokens accepted by `compare`; the suffixed ones are ablations
COMPARE_METHODS = METHODS + ("r3-noref", "r3-noreg")


class UsageError(ValueError):
    """Bad flag combination detected after parsing; maps to exit code 2."""


def _add_data_flags(p):
    p.add_argument("--embeddings", help="path to an embedding dataset")
    p.add_argument("--format", choices=("bin", "tsv"), default=None,
                   help="embedding file format (default: by extension, .tsv/.txt -> tsv)")
    p.add_argument("--synth", metavar="blobs:N,d,clusters,sep",
                   help="generate a synthetic blob dataset instead of loading one")


def _add_train_flags(p):
    p.add_argument("--method", default="r3", choices=METHODS)
    p.add_argument("--layers", type=int, default=2, dest="layers")
    p.add_argument("--codebook-size", type=int, default=64)
    p.add_argument("--top-k", type=int, default=None,
                   help="codewords mixed per layer (default: all of them)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lambda", type=float, default=0.01, dest="lam",
                   help="metric regularization weight")
    p.add_argument("--t", type=float, default=2.0)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--init", default="kmeans", choices=("kmeans", "random"))
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--no-ref", action="store_true",
                   help="disable the reference vector (initial residual = x)")
    p.add_argument("--beta", type=float, default=0.25,
                   help="commitment weight for the STE baselines")
    p.add_argument("--revive", action="store_true",
                   help="reseed codewords unused for a full epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sidforge",
        description="Train rating residual quantizers, emit semantic IDs, evaluate SID quality.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--threads", type=int, default=None,
                        help="cap worker threads (or set SIDFORGE_THREADS)")
    common.add_argument("--no-plot", action="store_true",
                        help="skip the figure files rendered next to CSV outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[common], help="train or fit a quantizer")
    _add_data_flags(p_train)
    _add_train_flags(p_train)
    p_train.add_argument("--out", required=True, help="output directory")

    p_encode = sub.add_parser("encode", parents=[common],
                              help="emit a SID table from a trained model")
    p_encode.add_argument("--model", required=True)
    _add_data_flags(p_encode)
    p_encode.add_argument("--out", required=True, help="SID TSV path")

    p_eval = sub.add_parser("eval", parents=[common], help="evaluate SID quality metrics")
    p_eval.add_argument("--sids", required=True)
    _add_data_flags(p_eval)
    p_eval.add_argument("--model", help="checkpoint (required for quantized embedding sources)")
    p_eval.add_argument("--cluster-by", default="level1", choices=metrics_mod.CLUSTER_KEYS)
    p_eval.add_argument("--embedding-source", default="soft_quantized",
                        choices=metrics_mod.EMBEDDING_SOURCES)
    p_eval.add_argument("--t", type=float, default=2.0)
    p_eval.add_argument("--max-pairs", type=int, default=metrics_mod.DEFAULT_MAX_PAIRS)
    p_eval.add_argument("--out", required=True, help="report JSON path")

    p_cmp = sub.add_parser("compare", parents=[common],
                           help="train several methods and tabulate their metrics")
    _add_data_flags(p_cmp)
    _add_train_flags(p_cmp)
    p_cmp.add_argument("--methods", required=True,
                       help="comma-separated list, e.g. r3,rkmeans,rqvae")
    p_cmp.add_argument("--out", required=True, help="comparison CSV path")
    p_cmp.add_argument("--cluster-by", default="level1", choices=metrics_mod.CLUSTER_KEYS)
    p_cmp.add_argument("--embedding-source", default="raw",
                       choices=metrics_mod.EMBEDDING_SOURCES,
                       help="embedding source for the cross-method metric table")

    p_corr = sub.add_parser("correlate", parents=[common],
                            help="Spearman correlation of metric columns vs a target")
    p_corr.add_argument("--table", required=True, help="CSV with one row per method")
    p_corr.add_argument("--target", required=True, help="name of the target column")

    p_proj = sub.add_parser("export-proj", parents=[common],
                            help="export projection CSVs for plotting")
    _add_data_flags(p_proj)
    p_proj.add_argument("--mode", required=True, choices=("pca3", "ring2"))
    p_proj.add_argument("--model", help="also export post-projection initial residuals")
    p_proj.add_argument("--out", required=True, help="CSV path")

    return parser


def _parse_synth(spec: str, seed: int) -> EmbeddingDataset:
    try:
        kind, payload = spec.split(":", 1)
        if kind != "blobs":
            raise ValueError(f"unknown generator {kind!r}")
        n, d, clusters, sep = payload.split(",")
        return synth_blobs(int(n), int(d), int(clusters), float(sep), seed=seed)
    except ValueError as exc:
        raise UsageError(f"bad --synth spec {spec!r}: {exc}") from exc


def _load_dataset(args) -> EmbeddingDataset:
    synth = getattr(args, "synth", None)
    if synth and args.embeddings:
        raise UsageError("give either --embeddings or --synth, not both")
    if synth:
        return _parse_synth(synth, args.seed)
    if not args.embeddings:
        raise UsageError("missing --embeddings (or --synth)")
    fmt = args.format
    if fmt is None:
        fmt = "tsv" if args.embeddings.endswith((".tsv", ".txt")) else "bin"
    return load_embeddings(args.embeddings, fmt)


def _train_config(args, method: str | None = None, lam: float | None = None,
                  use_ref: bool | None = None) -> TrainConfig:
    return TrainConfig(
        method=method if method is not None else args.method,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        lam=lam if lam is not None else args.lam,
        t=args.t,
        num_layers=args.layers,
        codebook_size=args.codebook_size,
        top_k=args.top_k,
        lr=args.lr,
        weight_decay=args.weight_decay,
        init_mode=args.init,
        log_every=args.log_every,
        use_ref=(not args.no_ref) if use_ref is None else use_ref,
        commitment_beta=args.beta,
        revive=args.revive,
    )


def cmd_train(args) -> int:
    dataset = _load_dataset(args)
    config = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, rows, state = train(dataset, config, with_state=True)
    checkpoint_save(params, state, out / "model.ckpt")
    write_train_log(rows, out / "train_log.csv")
    resolved = dict(asdict(config))
    resolved["dim"] = dataset.dim
    resolved["num_items"] = dataset.num_items
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
        f.write("\n")
    if not args.no_plot and rows:
        from .plots import save_training_curves

        save_training_curves(rows, out / "train_curves.png")
    print(f"trained {config.method}: {len(rows)} log rows, "
          f"final loss_rec={rows[-1].loss_rec:.6g}, usage={rows[-1].codebook_usage:.3f}")
    return 0


def cmd_encode(args) -> int:
    params, _ = checkpoint_load(args.model)
    dataset = _load_dataset(args)
    if dataset.num_items > 0 and dataset.dim != params.dim:
        print(f"error: model dimension d={params.dim} does not match "
              f"embeddings dimension d={dataset.dim}", file=sys.stderr)
        return 1
    table = emit_sids(dataset, params)
    save_sids(table, args.out)
    print(f"wrote {table.codes.shape[0]} SIDs to {args.out}")
    return 0


def _eval_embeddings(args, dataset, params):
    source = args.embedding_source
    if source == "raw":
        return np.asarray(dataset.matrix, dtype=np.float64)
    if params is None:
        raise UsageError(f"--embedding-source {source} requires --model")
    if source == "soft_quantized":
        return quantized_embeddings(dataset, params)
    return initial_residuals(dataset, params)


def cmd_eval(args) -> int:
    params = None
    if args.embedding_source in ("soft_quantized", "initial_residual") and not args.model:
        raise UsageError(f"--embedding-source {args.embedding_source} requires --model")
    if args.model:
        params, _ = checkpoint_load(args.model)
    sids = load_sids(args.sids)
    dataset = _load_dataset(args)
    if sids.item_ids != list(dataset.item_ids):
        raise ValueError("SID table and embeddings list different items (ids must match in order)")
    if params is not None and dataset.num_items > 0 and dataset.dim != params.dim:
        raise ValueError(f"model d={params.dim} vs embeddings d={dataset.dim}")
    embeddings = _eval_embeddings(args, dataset, params)
    m = params.codebook_size if params is not None else sids.codebook_size
    report = metrics_mod.evaluate_sids(
        sids, embeddings, m, cluster_by=args.cluster_by,
        embedding_source=args.embedding_source, t=args.t, max_pairs=args.max_pairs,
    )
    save_report(report, args.out)
    usage = float(np.mean(report.usage_per_layer))
    sc_txt = "undefined" if report.sc is None else f"{report.sc:.4f}"
    pd_txt = "undefined" if report.pd is None else f"{report.pd:.4f}"
    print(f"SC={sc_txt} PD={pd_txt} CR={report.collision_rate:.4f} "
          f"Gini={report.gini:.4f} usage={usage:.4f}")
    return 0


def _compare_token_to_config(token: str, args) -> TrainConfig:
    if token == "r3-noref":
        return _train_config(args, method="r3", use_ref=False)
    if token == "r3-noreg":
        return _train_config(args, method="r3", lam=0.0)
    return _train_config(args, method=token)


def cmd_compare(args) -> int:
    requested = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in requested if m not in COMPARE_METHODS]
    if unknown:
        raise UsageError(
            f"unknown method(s) {', '.join(unknown)}; valid: {', '.join(COMPARE_METHODS)}"
        )
    if not requested:
        raise UsageError("--methods is empty")
    dataset = _load_dataset(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    results = []
    for token in sorted(set(requested)):
        config = _compare_token_to_config(token, args)
        params, _rows = train(dataset, config)
        table = emit_sids(dataset, params)
        if args.embedding_source == "raw":
            embeddings = np.asarray(dataset.matrix, dtype=np.float64)
        elif args.embedding_source == "soft_quantized":
            embeddings = quantized_embeddings(dataset, params)
        else:
            embeddings = initial_residuals(dataset, params)
        report = metrics_mod.evaluate_sids(
            table, embeddings, params.codebook_size, cluster_by=args.cluster_by,
            embedding_source=args.embedding_source, t=args.t,
        )
        results.append({
            "method": token,
            "sc": report.sc,
            "pd": report.pd,
            "cr": report.collision_rate,
            "gini": report.gini,
            "usage": float(np.mean(report.usage_per_layer)),
        })
    with open(out, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "sc", "pd", "cr", "gini", "usage"])
        for row in results:
            writer.writerow([
                row["method"],
                "" if row["sc"] is None else f"{row['sc']:.6g}",
                "" if row["pd"] is None else f"{row['pd']:.6g}",
                f"{row['cr']:.6g}",
                f"{row['gini']:.6g}",
                f"{row['usage']:.6g}",
            ])
    if not args.no_plot:
        from .plots import save_compare_chart

        save_compare_chart(results, out.with_suffix(".png"))
    print(f"wrote {len(results)} method rows to {out}")
    return 0


def cmd_correlate(args) -> int:
    with open(args.table, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    if reader.fieldnames is None or args.target not in reader.fieldnames:
        raise UsageError(f"target column {args.target!r} not in {args.table}")
    if len(rows) < 3:
        raise UsageError(f"need at least 3 rows for rank correlation, got {len(rows)}")
    try:
        target = np.array([float(r[args.target]) for r in rows])
    except ValueError as exc:
        raise ValueError(f"target column {args.target!r} has non-numeric entries: {exc}") from exc
    for column in reader.fieldnames:
        if column == args.target:
            continue
        try:
            values = np.array([float(r[column]) for r in rows])
        except (ValueError, TypeError):
            continue  # non-numeric columns (method names) are skipped
        rho = metrics_mod.spearman(values, target)
        print(f"{column}\t{'null' if rho is None else f'{rho:.6g}'}")
    return 0


def cmd_export_proj(args) -> int:
    dataset = _load_dataset(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written = []
    if args.model:
        params, _ = checkpoint_load(args.model)
        if params.ref is None:
            raise ValueError("model has no reference vector; cannot export post-projection residuals")
        if dataset.num_items > 0 and dataset.dim != params.dim:
            raise ValueError(f"model d={params.dim} vs embeddings d={dataset.dim}")
        residual_ds = EmbeddingDataset(
            item_ids=list(dataset.item_ids),
            matrix=initial_residuals(dataset, params).astype(np.float32),
        )
        before = out.with_name(out.stem + "_before" + out.suffix)
        after = out.with_name(out.stem + "_after" + out.suffix)
        metrics_mod.export_projection(dataset, before, args.mode)
        metrics_mod.export_projection(residual_ds, after, args.mode)
        written = [before, after]
    else:
        metrics_mod.export_projection(dataset, out, args.mode)
        written = [out]
    if not args.no_plot:
        from .plots import save_projection_figure

        for path in written:
            with open(path, "r", encoding="utf-8", newline="") as f:
                reader = csv.reader(f)
                next(reader)
                data_rows = list(reader)
            save_projection_figure(data_rows, args.mode, Path(path).with_suffix(".png"),
                                   title=Path(path).stem)
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


COMMANDS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "correlate": cmd_correlate,
    "export-proj": cmd_export_proj,
}


def _apply_thread_cap(args) -> None:
    cap = args.threads
    if cap is None:
        env = os.environ.get("SIDFORGE_THREADS")
        if env:
            try:
                cap = int(env)
            except ValueError as exc:
                raise UsageError(f"SIDFORGE_THREADS={env!r} is not an integer") from exc
    if cap is None:
        return
    if cap < 1:
        raise UsageError(f"--threads must be >= 1, got {cap}")
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=cap)
    except ImportError:
        logger.info("threadpoolctl not installed; thread cap %d not enforced", cap)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _apply_thread_cap(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

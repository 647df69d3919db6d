import csv
import json

import numpy as np

from sidforge.cli import main
from sidforge.dataio import EmbeddingDataset, save_embeddings

SYNTH = "blobs:200,8,4,6"


def make_embeddings(tmp_path, n=60, d=6, seed=0, fmt="tsv"):
    rng = np.random.default_rng(seed)
    ds = EmbeddingDataset([f"i{k}" for k in range(n)],
                          rng.normal(size=(n, d)).astype(np.float32))
    path = tmp_path / ("emb.tsv" if fmt == "tsv" else "emb.bin")
    save_embeddings(ds, path, fmt)
    return path, ds


def train_args(tmp_path, out="run", extra=()):
    return ["train", "--synth", SYNTH, "--out", str(tmp_path / out),
            "--epochs", "2", "--codebook-size", "8", "--layers", "2",
            "--batch-size", "32", "--log-every", "2", "--no-plot", *extra]


class TestTrainCommand:
    def test_produces_artifacts(self, tmp_path):
        assert main(train_args(tmp_path)) == 0
        out = tmp_path / "run"
        assert (out / "model.ckpt").exists()
        assert (out / "train_log.csv").exists()
        assert (out / "config.json").exists()
        config = json.loads((out / "config.json").read_text())
        assert config["seed"] == 42
        assert config["lam"] == 0.01
        assert config["lr"] == 5e-4

    def test_missing_embeddings_is_usage_error(self, tmp_path):
        code = main(["train", "--out", str(tmp_path / "x"), "--no-plot"])
        assert code == 2

    def test_rqvae_random_runs(self, tmp_path):
        args = train_args(tmp_path, out="rq", extra=["--method", "rqvae", "--init", "random"])
        assert main(args) == 0

    def test_unknown_flag_exits_2(self, tmp_path):
        assert main(train_args(tmp_path) + ["--frobnicate"]) == 2

    def test_plot_rendered_by_default(self, tmp_path):
        args = ["train", "--synth", SYNTH, "--out", str(tmp_path / "plot"),
                "--epochs", "1", "--codebook-size", "4", "--layers", "1",
                "--batch-size", "32", "--log-every", "2"]
        assert main(args) == 0
        assert (tmp_path / "plot" / "train_curves.png").exists()

    def test_threads_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SIDFORGE_THREADS", "1")
        assert main(train_args(tmp_path, out="threads")) == 0
        monkeypatch.setenv("SIDFORGE_THREADS", "zero?")
        assert main(train_args(tmp_path, out="threads2")) == 2

    def test_threads_flag_validated(self, tmp_path):
        assert main(train_args(tmp_path, out="t0", extra=["--threads", "0"])) == 2
        assert main(train_args(tmp_path, out="t1", extra=["--threads", "2"])) == 0


class TestEncodeCommand:
    def _trained(self, tmp_path):
        assert main(train_args(tmp_path, out="model")) == 0
        return tmp_path / "model" / "model.ckpt"

    def test_deterministic_bytes(self, tmp_path):
        ckpt = self._trained(tmp_path)
        emb, _ = make_embeddings(tmp_path, d=8)
        for name in ("a.tsv", "b.tsv"):
            assert main(["encode", "--model", str(ckpt), "--embeddings", str(emb),
                         "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()

    def test_dim_mismatch_exit_1(self, tmp_path, capsys):
        ckpt = self._trained(tmp_path)
        emb, _ = make_embeddings(tmp_path, d=16)
        assert main(["encode", "--model", str(ckpt), "--embeddings", str(emb),
                     "--out", str(tmp_path / "x.tsv")]) == 1
        err = capsys.readouterr().err
        assert "8" in err and "16" in err

    def test_empty_dataset_header_only(self, tmp_path):
        ckpt = self._trained(tmp_path)
        empty = tmp_path / "empty.tsv"
        empty.write_text("")
        assert main(["encode", "--model", str(ckpt), "--embeddings", str(empty),
                     "--out", str(tmp_path / "sids.tsv")]) == 0
        lines = (tmp_path / "sids.tsv").read_text().splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("#item_id")


class TestEvalCommand:
    def _setup(self, tmp_path):
        assert main(train_args(tmp_path, out="model")) == 0
        ckpt = tmp_path / "model" / "model.ckpt"
        emb, ds = make_embeddings(tmp_path, d=8, n=50, seed=3)
        sids = tmp_path / "sids.tsv"
        assert main(["encode", "--model", str(ckpt), "--embeddings", str(emb),
                     "--out", str(sids)]) == 0
        return ckpt, emb, sids

    def test_report_written_and_summary_printed(self, tmp_path, capsys):
        ckpt, emb, sids = self._setup(tmp_path)
        out = tmp_path / "report.json"
        assert main(["eval", "--sids", str(sids), "--embeddings", str(emb),
                     "--model", str(ckpt), "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "SC=" in printed and "PD=" in printed and "CR=" in printed
        report = json.loads(out.read_text())
        assert report["cluster_by"] == "level1"
        assert report["embedding_source"] == "soft_quantized"
        assert report["t"] == 2.0

    def test_soft_quantized_requires_model(self, tmp_path):
        _, emb, sids = self._setup(tmp_path)
        assert main(["eval", "--sids", str(sids), "--embeddings", str(emb),
                     "--out", str(tmp_path / "r.json")]) == 2

    def test_raw_source_without_model(self, tmp_path):
        _, emb, sids = self._setup(tmp_path)
        assert main(["eval", "--sids", str(sids), "--embeddings", str(emb),
                     "--embedding-source", "raw",
                     "--out", str(tmp_path / "r.json")]) == 0


class TestCompareCommand:
    def test_two_methods_two_rows(self, tmp_path):
        out = tmp_path / "compare.csv"
        args = ["compare", "--synth", SYNTH, "--methods", "r3,rkmeans",
                "--out", str(out), "--epochs", "2", "--codebook-size", "8",
                "--layers", "2", "--batch-size", "32", "--no-plot"]
        assert main(args) == 0
        with open(out) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["method", "sc", "pd", "cr", "gini", "usage"]
        assert [r[0] for r in rows[1:]] == ["r3", "rkmeans"]

    def test_unknown_method_exit_2_lists_valid(self, tmp_path, capsys):
        args = ["compare", "--synth", SYNTH, "--methods", "r3,bogus",
                "--out", str(tmp_path / "c.csv"), "--no-plot"]
        assert main(args) == 2
        assert "bogus" in capsys.readouterr().err

    def test_rerun_identical(self, tmp_path):
        for name in ("c1.csv", "c2.csv"):
            args = ["compare", "--synth", SYNTH, "--methods", "rkmeans,kmeans",
                    "--out", str(tmp_path / name), "--no-plot"]
            assert main(args) == 0
        assert (tmp_path / "c1.csv").read_bytes() == (tmp_path / "c2.csv").read_bytes()

    def test_ablation_rows(self, tmp_path):
        out = tmp_path / "ablate.csv"
        args = ["compare", "--synth", SYNTH, "--methods", "r3,r3-noref,r3-noreg",
                "--out", str(out), "--epochs", "2", "--codebook-size", "8",
                "--layers", "2", "--batch-size", "32", "--no-plot"]
        assert main(args) == 0
        with open(out) as f:
            methods = [r[0] for r in list(csv.reader(f))[1:]]
        assert methods == ["r3", "r3-noref", "r3-noreg"]


class TestCorrelateCommand:
    def _write_table(self, tmp_path, rows, header):
        p = tmp_path / "table.csv"
        with open(p, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
        return p

    def test_monotone_table_rho_one(self, tmp_path, capsys):
        p = self._write_table(tmp_path, [[1, 10], [2, 20], [3, 30]], ["m", "target"])
        assert main(["correlate", "--table", str(p), "--target", "target"]) == 0
        out = capsys.readouterr().out
        assert "m\t1" in out

    def test_constant_column_null(self, tmp_path, capsys):
        p = self._write_table(tmp_path, [[1, 10], [1, 20], [1, 30]], ["m", "target"])
        assert main(["correlate", "--table", str(p), "--target", "target"]) == 0
        assert "m\tnull" in capsys.readouterr().out

    def test_short_table_exit_2(self, tmp_path):
        p = self._write_table(tmp_path, [[1, 10], [2, 20]], ["m", "target"])
        assert main(["correlate", "--table", str(p), "--target", "target"]) == 2

    def test_missing_target_exit_2(self, tmp_path):
        p = self._write_table(tmp_path, [[1, 10]] * 3, ["m", "other"])
        assert main(["correlate", "--table", str(p), "--target", "target"]) == 2


class TestExportProjCommand:
    def test_pca3_row_count(self, tmp_path):
        out = tmp_path / "proj.csv"
        args = ["export-proj", "--synth", "blobs:100,6,3,5", "--mode", "pca3",
                "--out", str(out), "--no-plot"]
        assert main(args) == 0
        with open(out) as f:
            rows = list(csv.reader(f))
        assert len(rows) == 101
        assert rows[0] == ["id", "x", "y", "z"]

    def test_ring2_angles_bounded(self, tmp_path):
        out = tmp_path / "ring.csv"
        args = ["export-proj", "--synth", "blobs:50,4,2,5", "--mode", "ring2",
                "--out", str(out), "--no-plot"]
        assert main(args) == 0
        with open(out) as f:
            angles = [float(r[3]) for r in list(csv.reader(f))[1:]]
        assert all(-np.pi <= a <= np.pi for a in angles)

    def test_unknown_mode_exit_2(self, tmp_path):
        args = ["export-proj", "--synth", SYNTH, "--mode", "torus",
                "--out", str(tmp_path / "x.csv"), "--no-plot"]
        assert main(args) == 2

    def test_before_after_pair_with_model(self, tmp_path):
        assert main(train_args(tmp_path, out="model")) == 0
        ckpt = tmp_path / "model" / "model.ckpt"
        out = tmp_path / "proj.csv"
        args = ["export-proj", "--synth", SYNTH, "--mode", "ring2",
                "--model", str(ckpt), "--out", str(out), "--no-plot"]
        assert main(args) == 0
        assert (tmp_path / "proj_before.csv").exists()
        assert (tmp_path / "proj_after.csv").exists()

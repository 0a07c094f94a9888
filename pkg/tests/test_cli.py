import csv

import numpy as np
import pytest

from somtp.cli import DEFAULT_LAMBDAS, main
from somtp.data import Dataset, synth_dataset, write_sktime_ts, write_ucr_tsv

TINY_SET = ["--set", "n=2", "--set", "epochs=2", "--set", "batch_size=4", "--set", "lr=0.001",
            "--set", "widths=[3,4,4]", "--set", "kernels=[3,3,3]", "--set", "hidden=[6,5]"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def files(tmp_path):
    write_ucr_tsv(synth_dataset("spike", 24, 16, seed=1), tmp_path / "train.tsv")
    write_ucr_tsv(synth_dataset("spike", 8, 16, seed=2), tmp_path / "val.tsv")
    write_ucr_tsv(synth_dataset("spike", 10, 16, seed=3), tmp_path / "test.tsv")
    return tmp_path


def train_cli(files, out, *extra):
    return main(["train", "--train-file", str(files / "train.tsv"), "--val-file", str(files / "val.tsv"),
                 "--out-dir", str(out), *TINY_SET, *extra])


class TestTrain:
    def test_outputs_and_determinism(self, files, capsys):
        assert train_cli(files, files / "r1") == 0
        assert train_cli(files, files / "r2") == 0
        for f in ("metrics.csv", "selection.csv", "best.ckpt"):
            assert (files / "r1" / f).read_bytes() == (files / "r2" / f).read_bytes()
        rows = read_csv(files / "r1" / "metrics.csv")
        assert [r["epoch"] for r in rows] == ["0", "1"]
        assert "best epoch" in capsys.readouterr().out

    def test_gtp_has_no_selection_log(self, files):
        assert train_cli(files, files / "g", "--set", "pooling=gtp") == 0
        assert not (files / "g" / "selection.csv").exists()

    def test_synthetic_source(self, tmp_path):
        code = main(["train", "--train-file", "synth:mixed:20:16:4", "--out-dir", str(tmp_path), *TINY_SET])
        assert code == 0 and (tmp_path / "best.ckpt").exists()

    def test_config_error(self, files, capsys):
        assert train_cli(files, files / "x", "--set", "lamda=0.1") == 2
        err = capsys.readouterr().err.strip()
        assert err.startswith("error[config]: unknown config keys") and "\n" not in err

    def test_data_error(self, tmp_path, capsys):
        (tmp_path / "bad.tsv").write_text("1 0 1\n2 0\n")
        assert main(["train", "--train-file", str(tmp_path / "bad.tsv"), "--out-dir", str(tmp_path)]) == 1
        assert capsys.readouterr().err.startswith("error[data]:")

    def test_usage_error(self, capsys):
        assert main(["train"]) == 2
        assert capsys.readouterr().err.startswith("error[usage]:")


class TestEvalExplain:
    @pytest.fixture
    def ckpt(self, files):
        assert train_cli(files, files / "run") == 0
        return files / "run" / "best.ckpt"

    def test_eval_writes_reports(self, files, ckpt):
        out = files / "ev"
        assert main(["eval", "--checkpoint", str(ckpt), "--test-file", str(files / "test.tsv"),
                     "--out-dir", str(out)]) == 0
        metrics = read_csv(out / "eval_metrics.csv")
        assert {"acc", "f1_macro", "roc_auc", "pr_auc"} <= set(metrics[0])
        rows = read_csv(out / "eval_probs.csv")
        assert len(rows) == 10 and set(rows[0]) == {"index", "label", "p_0", "p_1"}
        assert float(rows[0]["p_0"]) + float(rows[0]["p_1"]) == pytest.approx(1.0)
        assert len(read_csv(out / "eval_selection.csv")) == 3

    def test_eval_repeatable(self, files, ckpt):
        for name in ("e1", "e2"):
            main(["eval", "--checkpoint", str(ckpt), "--test-file", str(files / "test.tsv"),
                  "--out-dir", str(files / name)])
        assert (files / "e1" / "eval_probs.csv").read_bytes() == (files / "e2" / "eval_probs.csv").read_bytes()

    def test_eval_dimension_mismatch(self, files, ckpt, capsys):
        X = np.zeros((4, 2, 16))
        write_sktime_ts(Dataset(X, [0, 1, 0, 1], ("0", "1")), files / "multi.ts")
        code = main(["eval", "--checkpoint", str(ckpt), "--test-file", str(files / "multi.ts")])
        assert code == 1 and "does not match" in capsys.readouterr().err

    def test_eval_bad_checkpoint(self, files, capsys):
        (files / "junk.ckpt").write_bytes(b"junk")
        assert main(["eval", "--checkpoint", str(files / "junk.ckpt"), "--test-file", str(files / "test.tsv")]) == 1
        assert capsys.readouterr().err.startswith("error[checkpoint]:")

    def test_explain(self, files, ckpt):
        out = files / "ex"
        args = ["explain", "--checkpoint", str(ckpt), "--test-file", str(files / "test.tsv"),
                "--indices", "0,3", "--out-dir", str(out)]
        assert main(args) == 0
        first = (out / "relevance_0.csv").read_bytes()
        for i in (0, 3):
            rel = np.loadtxt(out / f"relevance_{i}.csv", delimiter=",", skiprows=2, usecols=3)
            assert abs(rel.sum() - 1.0) < 1e-4
        assert main(args) == 0
        assert (out / "relevance_0.csv").read_bytes() == first

    def test_explain_index_out_of_range(self, files, ckpt, capsys):
        code = main(["explain", "--checkpoint", str(ckpt), "--test-file", str(files / "test.tsv"),
                     "--indices", "10", "--out-dir", str(files / "ex")])
        assert code == 1 and "error[index]" in capsys.readouterr().err

    def test_explain_gtp_model(self, files):
        assert train_cli(files, files / "g", "--set", "pooling=gtp") == 0
        out = files / "gx"
        assert main(["explain", "--checkpoint", str(files / "g" / "best.ckpt"), "--test-file",
                     str(files / "test.tsv"), "--indices", "1", "--out-dir", str(out)]) == 0
        assert "selected=gtp" in (out / "relevance_1.csv").read_text().splitlines()[0]


class TestSweep:
    def test_default_grid(self):
        assert len(DEFAULT_LAMBDAS) == 11
        assert DEFAULT_LAMBDAS[0] == pytest.approx(1e-5) and DEFAULT_LAMBDAS[-1] == pytest.approx(1.0)
        np.testing.assert_allclose(np.diff(np.log10(DEFAULT_LAMBDAS)), 0.5)

    def test_rows_per_lambda(self, files):
        out = files / "sweep.csv"
        code = main(["sweep", "--train-file", str(files / "train.tsv"), "--test-file", str(files / "test.tsv"),
                     "--lambdas", "0,0.1,1", "--out", str(out), *TINY_SET])
        assert code == 0
        rows = read_csv(out)
        assert [float(r["lambda"]) for r in rows] == [0.0, 0.1, 1.0]
        assert all(r["error"] == "" for r in rows)

    def test_bad_grid(self, files, capsys):
        assert main(["sweep", "--train-file", str(files / "train.tsv"), "--lambdas", "a,b",
                     "--out", str(files / "s.csv")]) == 2
        assert capsys.readouterr().err.startswith("error[usage]:")


class TestBench:
    def test_bench_pooling_csv(self, tmp_path):
        out = tmp_path / "p.csv"
        assert main(["bench-pooling", "--t-values", "32,64", "--k", "8", "--n", "2", "--batch", "2",
                     "--repeats", "1", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows) == 8 and {r["op"] for r in rows} == {"gtp", "stp", "dtp", "somtp"}

    def test_bench_kernels_csv(self, tmp_path, capsys):
        out = tmp_path / "k.csv"
        assert main(["bench-kernels", "--repeats", "1", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert {r["kernel"] for r in rows} >= {"softdtw_forward", "adam_update"}

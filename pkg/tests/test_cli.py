import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from mrcal.cli import _parse_grid, main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    code = main(
        ["synth", "--out", str(out), "--n", "8", "--size", "16", "--seed", "3"]
    )
    assert code == 0
    return out


class TestSynth:
    def test_default_split_counts(self, capsys, tmp_path):
        code, out, _ = run_cli(
            capsys, "synth", "--out", str(tmp_path / "ds"), "--n", "20", "--size", "16"
        )
        assert code == 0
        doc = json.loads(out)
        assert doc["splits"] == {"train": 14, "val": 3, "test": 3}
        assert (tmp_path / "ds/manifest.json").exists()

    def test_missing_out_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--n", "5"])
        assert exc.value.code == 2

    def test_rerun_identical_manifest(self, capsys, tmp_path):
        args = ["synth", "--n", "5", "--size", "16", "--seed", "7"]
        main(args + ["--out", str(tmp_path / "a")])
        main(args + ["--out", str(tmp_path / "b")])
        capsys.readouterr()
        ha = hashlib.sha256((tmp_path / "a/manifest.json").read_bytes()).hexdigest()
        hb = hashlib.sha256((tmp_path / "b/manifest.json").read_bytes()).hexdigest()
        assert ha == hb


class TestFuse:
    def test_writes_all_samples(self, capsys, dataset, tmp_path):
        code, out, _ = run_cli(
            capsys,
            "fuse", "--data", str(dataset), "--method", "mc",
            "--out", str(tmp_path / "fused"),
        )
        assert code == 0
        doc = json.loads(out)
        assert doc["written"] == 8
        assert len(list((tmp_path / "fused").glob("*_mc.mrc"))) == 8

    def test_staple_sidecar_has_performance(self, capsys, dataset, tmp_path):
        code, _, _ = run_cli(
            capsys,
            "fuse", "--data", str(dataset), "--method", "staple",
            "--out", str(tmp_path / "fused"),
        )
        assert code == 0
        sidecars = sorted((tmp_path / "fused").glob("*.mrc.json"))
        doc = json.loads(sidecars[0].read_text())
        assert len(doc["rater_performance"]["sensitivity"]) == 3

    def test_rs_requires_seed(self, capsys, dataset, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(
                ["fuse", "--data", str(dataset), "--method", "rs",
                 "--out", str(tmp_path / "fused")]
            )
        assert exc.value.code == 2

    def test_bad_data_dir_is_io_error(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys,
            "fuse", "--data", str(tmp_path / "nope"), "--method", "mc",
            "--out", str(tmp_path / "fused"),
        )
        assert code == 1
        assert err != ""


class TestTrainEval:
    def test_train_writes_checkpoint_and_trace(self, capsys, dataset, tmp_path):
        ckpt = tmp_path / "model.mrc"
        code, out, _ = run_cli(
            capsys,
            "train", "--data", str(dataset), "--loss", "rps",
            "--epochs", "2", "--out", str(ckpt),
        )
        assert code == 0
        lines = [json.loads(line) for line in out.strip().split("\n")]
        assert [line["epoch"] for line in lines] == [0, 1]
        assert all(np.isfinite(line["loss"]) for line in lines)
        assert ckpt.exists() and ckpt.with_suffix(".mrc.json").exists()

    def test_staple_loss_records_performance(self, capsys, dataset, tmp_path):
        ckpt = tmp_path / "model.mrc"
        code, _, _ = run_cli(
            capsys,
            "train", "--data", str(dataset), "--loss", "staple",
            "--epochs", "1", "--out", str(ckpt),
        )
        assert code == 0
        sidecar = json.loads(ckpt.with_suffix(".mrc.json").read_text())
        assert "staple_rater_performance" in sidecar["extra"]

    def test_eval_checkpoint(self, capsys, dataset, tmp_path):
        ckpt = tmp_path / "model.mrc"
        run_cli(
            capsys,
            "train", "--data", str(dataset), "--loss", "rps",
            "--epochs", "1", "--out", str(ckpt),
        )
        report = tmp_path / "report.json"
        rel = tmp_path / "rel.csv"
        code, out, _ = run_cli(
            capsys,
            "eval", "--model", str(ckpt), "--data", str(dataset),
            "--split", "test", "--report", str(report), "--reliability", str(rel),
        )
        assert code == 0
        doc = json.loads(out)
        assert 0.0 <= doc["mr_ece"] <= 1.0
        saved = json.loads(report.read_text())
        assert saved["mr_ece"]["point"] == doc["mr_ece"]
        assert rel.read_text().startswith("bin_lo,bin_hi,count,conf,acc")

    def test_eval_oracle(self, capsys, dataset, tmp_path):
        code, out, _ = run_cli(
            capsys,
            "eval", "--model", "oracle", "--data", str(dataset), "--split", "test",
        )
        assert code == 0
        doc = json.loads(out)
        assert doc["auc"] > 0.9

    def test_eval_reports_byte_identical(self, capsys, dataset, tmp_path):
        reports = []
        for name in ("r1.json", "r2.json"):
            path = tmp_path / name
            code, _, _ = run_cli(
                capsys,
                "eval", "--model", "oracle", "--data", str(dataset),
                "--split", "test", "--report", str(path),
            )
            assert code == 0
            reports.append(path.read_bytes())
        assert reports[0] == reports[1]

    def test_missing_model_is_io_error(self, capsys, dataset, tmp_path):
        code, _, err = run_cli(
            capsys,
            "eval", "--model", str(tmp_path / "missing.mrc"), "--data", str(dataset),
        )
        assert code == 1
        assert err != ""


class TestSweep:
    def test_grid_parse(self):
        values = _parse_grid("0.5:1.0:0.1")
        assert len(values) == 6
        assert abs(values[0] - 0.5) < 1e-12
        assert abs(values[-1] - 1.0) < 1e-12
        assert _parse_grid("0.8") == [0.8]
        with pytest.raises(ValueError):
            _parse_grid("1.0:0.5:0.1")
        with pytest.raises(ValueError):
            _parse_grid("abc")

    def test_sweep_reports_argmin(self, capsys, dataset):
        code, out, _ = run_cli(
            capsys,
            "sweep", "--data", str(dataset), "--values", "0.4:0.8:0.2",
            "--epochs", "1",
        )
        assert code == 0
        doc = json.loads(out)
        assert len(doc["table"]) == 3
        best = min(doc["table"], key=lambda row: row["metric"])
        assert doc["argmin"] == best["value"]

    def test_bad_values_is_usage_error(self, capsys, dataset):
        code, _, _ = run_cli(
            capsys, "sweep", "--data", str(dataset), "--values", "oops"
        )
        assert code == 2


class TestReport:
    def test_round_trip(self, capsys, tmp_path):
        doc = {"mr_ece": {"point": 0.01}}
        path = tmp_path / "report.json"
        path.write_text(json.dumps(doc))
        code, out, _ = run_cli(capsys, "report", "--report", str(path))
        assert code == 0
        assert json.loads(out) == doc

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "report", "--report", str(tmp_path / "nope.json")
        )
        assert code == 1
        assert err != ""


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        result = subprocess.run(
            [sys.executable, "-m", "mrcal.cli", "synth", "--out",
             str(tmp_path / "ds"), "--n", "2", "--size", "16"],
            capture_output=True, text=True,
        )
        assert result.returncode == 0
        json.loads(result.stdout)  # stdout is pure JSON

    def test_thread_cap_env(self, tmp_path):
        for threads in ("1", "4"):
            result = subprocess.run(
                [sys.executable, "-m", "mrcal.cli", "synth", "--out",
                 str(tmp_path / f"ds{threads}"), "--n", "2", "--size", "16"],
                capture_output=True, text=True,
                env={"MRCAL_THREADS": threads, "PATH": "/usr/bin:/bin"},
            )
            assert result.returncode == 0

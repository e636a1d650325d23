import filecmp
import json
import subprocess
import sys
import time

import pytest

from caperec.cli import main

TINY = {
    "model": {"backbone": "din", "emb_dim": 8, "attn_hidden": [16], "head_hidden": [16],
              "pe": {"variant": "cape", "d_pos": 8, "n_max": 30}},
    "train": {"learning_rate": 0.003, "batch_size": 64, "max_epochs": 2, "seed": 0,
              "eval_negatives": 10, "ranking_ks": [1, 5]},
    "synthetic": {"n_users": 100, "n_items": 500, "n_intents": 10},
}


def write_config(path, raw):
    path.write_text(json.dumps(raw))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "tiny.json", TINY)
    out = root / "out"
    start = time.perf_counter()
    code = main(["train", "--config", cfg, "--seed", "11", "--out", str(out)])
    return code, out, cfg, time.perf_counter() - start


class TestGenData:
    def test_idempotent(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-data", "--users", "100", "--seed", "7", "--out", str(tmp_path / name)]) == 0
        assert filecmp.cmp(tmp_path / "a" / "data.csv", tmp_path / "b" / "data.csv", shallow=False)
        assert filecmp.cmp(tmp_path / "a" / "spec.json", tmp_path / "b" / "spec.json", shallow=False)

    def test_creates_missing_directory(self, tmp_path):
        out = tmp_path / "deep" / "er"
        assert main(["gen-data", "--users", "10", "--out", str(out)]) == 0
        assert (out / "data.csv").exists()

    def test_single_intent(self, tmp_path):
        assert main(["gen-data", "--users", "20", "--intents", "1", "--out", str(tmp_path)]) == 0
        spec = json.loads((tmp_path / "spec.json").read_text())
        assert spec["n_intents"] == 1 and spec["items_per_intent"] == 500

    def test_flags_override_config(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"synthetic": {"n_users": 30, "seed": 1, "noise_rate": 0.1}})
        assert main(["gen-data", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "o")]) == 0
        spec = json.loads((tmp_path / "o" / "spec.json").read_text())
        assert (spec["n_users"], spec["seed"], spec["noise_rate"]) == (30, 5, 0.1)

    def test_infeasible_spec(self, tmp_path, capsys):
        assert main(["gen-data", "--items-per-intent", "0", "--out", str(tmp_path)]) == 2
        assert "items_per_intent" in capsys.readouterr().err


class TestTrain:
    def test_tiny_run(self, trained):
        code, out, _, seconds = trained
        assert code == 0
        assert seconds < 60
        for name in ("model.ckpt", "metrics.jsonl", "report.json", "config.json", "train.csv"):
            assert (out / name).exists()
        rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [1, 2]
        assert all("timestamp" in r["meta"] for r in rows)

    def test_seed_reflected_in_report(self, trained):
        _, out, _, _ = trained
        report = json.loads((out / "report.json").read_text())
        assert report["seed"] == 11
        assert report["metrics"]["test"]["seed"] == 11
        assert json.loads((out / "config.json").read_text())["train"]["seed"] == 11

    def test_invalid_variant(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", TINY)
        assert main(["train", "--config", cfg, "--variant", "alibi", "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        for name in ("none", "naive", "rope", "cope", "cape"):
            assert name in err

    def test_every_violation_listed(self, tmp_path, capsys):
        bad = json.loads(json.dumps(TINY))
        bad["train"]["batch_size"] = 0
        bad["train"]["early_stop_patience"] = 0
        bad["model"]["emb_dim"] = 0
        assert main(["train", "--config", write_config(tmp_path / "c.json", bad)]) == 2
        err = capsys.readouterr().err
        assert "batch_size" in err and "early_stop_patience" in err and "emb_dim" in err

    def test_unknown_keys(self, tmp_path, capsys):
        bad = dict(TINY, trian={})
        assert main(["train", "--config", write_config(tmp_path / "c.json", bad)]) == 2
        assert "trian" in capsys.readouterr().err

    def test_missing_data_path(self, tmp_path, capsys):
        bad = dict(TINY, data={"path": str(tmp_path / "nope.csv")})
        assert main(["train", "--config", write_config(tmp_path / "c.json", bad)]) == 2
        assert "nope.csv" in capsys.readouterr().err


class TestEval:
    def test_reproduces_training_metrics(self, trained, tmp_path, capsys):
        _, out, _, _ = trained
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--data", str(out / "train.csv"),
                     "--split", "train", "--out", str(tmp_path)]) == 0
        row = json.loads(capsys.readouterr().out)
        want = json.loads((out / "report.json").read_text())["metrics"]["train"]
        for key in ("auc", "gauc", "logloss"):
            assert abs(row[key] - want[key]) < 1e-12
        assert row["recall_at_k"] == want["recall_at_k"]
        saved = json.loads((tmp_path / "eval_train.json").read_text())
        assert saved["auc"] == row["auc"] and "timestamp" in saved["meta"]

    def test_repeat_eval_bitwise(self, trained, capsys):
        _, out, _, _ = trained
        args = ["eval", "--checkpoint", str(out / "model.ckpt"), "--data", str(out / "test.csv")]
        capsys.readouterr()
        main(args)
        first = capsys.readouterr().out
        main(args)
        assert capsys.readouterr().out == first

    def test_config_mismatch_names_parameter(self, trained, tmp_path, capsys):
        _, out, _, _ = trained
        other = json.loads(json.dumps(TINY))
        other["model"]["attn_hidden"] = [12]
        cfg = write_config(tmp_path / "c.json", other)
        code = main(["eval", "--config", cfg, "--checkpoint", str(out / "model.ckpt"), "--data", str(out / "test.csv")])
        assert code == 2
        assert "attn.layer0.weight" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(tmp_path / "y.csv")])
        assert code == 2
        assert "x.ckpt" in capsys.readouterr().err


class TestGradcheck:
    def test_single_combo(self, capsys):
        assert main(["gradcheck", "--combo", "din+cape"]) == 0
        out = capsys.readouterr().out
        assert "PASS din+cape" in out and "1/1" in out

    def test_impossible_tolerance(self, capsys):
        assert main(["gradcheck", "--combo", "din+none", "--tolerance", "1e-12"]) == 1
        assert "FAIL din+none" in capsys.readouterr().out

    def test_unknown_combo(self, capsys):
        assert main(["gradcheck", "--combo", "din+alibi"]) == 2
        assert "sasrec+cape" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "caperec", "gradcheck", "--combo", "sasrec+rope"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert "PASS sasrec+rope" in proc.stdout

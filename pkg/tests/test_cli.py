import json
import subprocess
import sys

import pytest

from nfuse.cli import main
from nfuse.harness.report import read_subset_table
from nfuse.tensor import BACKWARD_RULES

TINY_TASK = {"channels": 8, "feature_shape": [4], "train_samples": 200, "val_samples": 50, "test_samples": 100}


@pytest.fixture
def tiny_config(tmp_path):
    def write(**extra):
        data = {"seed": 1, "task": dict(TINY_TASK), "train": {"steps": 20, "lr": 1e-3}}
        for key, value in extra.items():
            if isinstance(value, dict):
                data.setdefault(key, {}).update(value)
            else:
                data[key] = value
        path = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*')))}.json"
        path.write_text(json.dumps(data))
        return str(path)
    return write


def test_gradcheck_ops_passes(capsys):
    assert main(["gradcheck", "--scope", "ops", "--precision", "f64"]) == 0
    out = capsys.readouterr().out
    assert "PASS ops" in out and "FAIL" not in out and "max_rel_err" in out


def test_corrupted_backward_rule_is_named(monkeypatch, capsys):
    original = BACKWARD_RULES["exp"]
    monkeypatch.setitem(BACKWARD_RULES, "exp", lambda saved, g: tuple(2 * x for x in original(saved, g)))
    assert main(["gradcheck", "--scope", "ops"]) == 1
    failing = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("FAIL")]
    assert failing and all(ln.split()[2] == "exp" for ln in failing)


def test_invariants_report_trial_counts(capsys):
    assert main(["invariants", "--trials", "100"]) == 0
    lines = capsys.readouterr().out.splitlines()
    names = {ln.split()[1] for ln in lines if ln.startswith("PASS")}
    assert {"normalization", "single_modality_identity", "convex_bound", "modality_permutation", "arity"} <= names
    assert all("trials=100" in ln for ln in lines if ln.startswith("PASS"))


def test_unknown_config_key_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"stepz": 3}}))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "train.stepz" in capsys.readouterr().err


def test_unreadable_config_exits_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_compare_needs_two_fusers(tiny_config, tmp_path):
    assert main(["compare", "--config", tiny_config(), "--out", str(tmp_path / "c"), "--fusers", "tfusion"]) == 2


def test_unknown_fuser_exits_2(tiny_config, tmp_path):
    assert main(["train", "--config", tiny_config(), "--out", str(tmp_path / "o"), "--fuser", "gff"]) == 2


def test_numerical_abort_exits_3(tiny_config, tmp_path, capsys):
    cfg = tiny_config(fuser="mean", train={"lr": 1e37, "steps": 5})
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 3
    assert "step" in capsys.readouterr().err


def test_train_writes_artifacts_and_evaluate_reuses_them(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", tiny_config(), "--out", str(out)]) == 0
    echoed = json.loads(capsys.readouterr().out.splitlines()[0])
    assert echoed["block"]["depth"] == 2 and echoed["seed"] == 1
    for name in ("checkpoint.tfm", "loss_curve.csv", "metrics.jsonl", "metrics.csv", "config.json"):
        assert (out / name).exists(), name
    for name in ("loss_curve.csv", "metrics.csv"):
        first = (out / name).read_text().splitlines()[0]
        assert first.startswith("# config: ") and json.loads(first[10:])["seed"] == 1
    header, rows = read_subset_table(out / "metrics.csv")
    assert header == ["m1", "m2", "m3", "m4", "accuracy"] and len(rows) == 16 and rows[-1][0] == "Average"

    assert main(["evaluate", "--checkpoint", str(out / "checkpoint.tfm")]) == 0
    records = [json.loads(ln) for ln in (out / "metrics.jsonl").read_text().splitlines()]
    assert len(records) == 2 and records[0]["per_subset"] == records[1]["per_subset"]
    assert (out / "metrics_test.csv").read_text() == (out / "metrics.csv").read_text()


def test_seed_flag_overrides_config(tiny_config, tmp_path, capsys):
    assert main(["train", "--config", tiny_config(), "--seed", "5", "--out", str(tmp_path / "o")]) == 0
    assert json.loads(capsys.readouterr().out.splitlines()[0])["task"]["seed"] == 5


def test_compare_outputs(tiny_config, tmp_path, capsys):
    out = tmp_path / "cmp"
    code = main(["compare", "--config", tiny_config(), "--out", str(out),
                 "--fusers", "tfusion,no_ce,mean", "--seeds", "1,2"])
    assert code == 0
    header, rows = read_subset_table(out / "compare.csv")
    assert header[-4:] == ["tfusion", "tfusion_no_ce", "mean", "best"] and len(rows) == 16
    report = json.loads((out / "compare_report.json").read_text())
    assert len(report["pairs"]) == 3
    assert set(report["mean_accuracy"]) == {"tfusion", "tfusion_no_ce", "mean"}
    assert (out / "compare_seed1.csv").exists() and (out / "compare_seed2.csv").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "nfuse", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout

import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from graph_unlearn.cli import main
from graph_unlearn.evaluation import strip_timing
from graph_unlearn.linear_model import load_model

SMALL = ["--set", "dataset.csbm.n=120", "--set", "dataset.csbm.dim=6", "--set", "model.epochs=30",
         "--set", "dataset.csbm.p=0.08", "--set", "dataset.csbm.q=0.02"]


def run(tmp_path, name, *args):
    out = tmp_path / name
    code = main([*args, "--out", str(out), *SMALL])
    return code, out


def stripped(path: Path):
    return strip_timing(json.loads(path.read_text()))


def test_generate_then_train_from_files(tmp_path, capsys):
    code, out = run(tmp_path, "gen", "generate")
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["num_nodes"] == 120
    cfg = {"dataset": {"edges": "edges.tsv", "features": "features.csv", "labels": "labels.txt"},
           "model": {"epochs": 10}}
    (out / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(out / "cfg.json"), "--out", str(tmp_path / "tr")]) == 0
    assert load_model(tmp_path / "tr" / "model.bin").dim == 6
    assert "final_objective" in capsys.readouterr().out


def test_train_unlearn_deterministic(tmp_path):
    outs = []
    for k in range(2):
        code, out = run(tmp_path, f"t{k}", "train", "--seed", "4")
        assert code == 0
        code, _ = run(tmp_path, f"t{k}", "unlearn", "--seed", "4", "--model", str(out / "model.bin"),
                      "--set", 'unlearn.delete={"random_fraction": 0.05}')
        assert code == 0
        outs.append(out)
    a, b = outs
    for name in ("model.bin", "unlearned.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    for name in ("trace.json", "unlearn.json"):
        assert stripped(a / name) == stripped(b / name)
    doc = json.loads((a / "unlearn.json").read_text())
    assert doc["model_path"] == "unlearned.bin" and doc["deleted_count"] == 5


def test_unlearn_gram_cache_matches_direct(tmp_path):
    code, out = run(tmp_path, "g", "train")
    model = str(out / "model.bin")
    gram = str(tmp_path / "gram.bin")
    assert run(tmp_path, "direct", "unlearn", "--model", model)[0] == 0
    assert run(tmp_path, "cache1", "unlearn", "--model", model, "--precompute-gram", gram)[0] == 0
    assert Path(gram).exists()
    assert run(tmp_path, "cache2", "unlearn", "--model", model, "--precompute-gram", gram)[0] == 0
    Wd = load_model(tmp_path / "direct" / "unlearned.bin").W
    for name in ("cache1", "cache2"):
        Wc = load_model(tmp_path / name / "unlearned.bin").W
        assert np.linalg.norm(Wc - Wd) <= 1e-8 * np.linalg.norm(Wd)


def test_eval_inject_sweep_delta_bound(tmp_path, capsys):
    assert run(tmp_path, "e", "eval")[0] == 0
    ev = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert set(ev["strategies"]) == {"projector", "influence_plus", "fisher_plus", "retrain"}

    assert run(tmp_path, "i", "inject")[0] == 0
    inj = json.loads((tmp_path / "i" / "inject.json").read_text())
    assert inj["injected_norm_after"]["projector"] <= 1e-12

    csv_path = tmp_path / "sweep.csv"
    code, out = run(tmp_path, "s", "sweep", "--csv", str(csv_path), "--set", "eval.ratios=[0.05, 0.1]",
                    "--set", "eval.seeds=[0]", "--set", 'eval.strategies=["projector", "retrain"]')
    assert code == 0
    assert len(json.loads((out / "sweep.json").read_text())) == 4
    assert len(csv_path.read_text().splitlines()) == 5

    assert run(tmp_path, "d", "delta")[0] == 0
    assert "leave_one_out_all" in json.loads((tmp_path / "d" / "delta.json").read_text())

    capsys.readouterr()
    assert run(tmp_path, "b", "bound", "--set", "eval.sample_count=2")[0] == 0
    text = capsys.readouterr().out
    for key in ("Delta", "observed", "slack_ratio", "bound_holds", "prop2_threshold", "delta"):
        assert key in text


def test_bound_with_identical_rows_has_zero_delta(tmp_path):
    rows = np.tile([1.0, 2.0], (10, 1))
    d = tmp_path / "data"
    d.mkdir()
    (d / "edges.tsv").write_text("".join(f"{i}\t{i + 1}\n" for i in range(9)))
    (d / "features.csv").write_text("".join(f"{a},{b}\n" for a, b in rows))
    (d / "labels.txt").write_text("".join(f"{1 if i % 2 else -1}\n" for i in range(10)))
    cfg = {"dataset": {"edges": "edges.tsv", "features": "features.csv", "labels": "labels.txt"},
           "model": {"epochs": 5}, "eval": {"sample_count": 1}, "unlearn": {"delete": {"explicit_ids": [0]}},
           "split": {"train_fraction": 0.9}}
    (d / "cfg.json").write_text(json.dumps(cfg))
    assert main(["delta", "--config", str(d / "cfg.json"), "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "delta.json").read_text())
    assert rep["leave_one_out_all"] == pytest.approx(0.0, abs=1e-12)


def test_bound_zero_deletion_reports_zero(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"unlearn": {"delete": {"explicit_ids": []}}, "eval": {"sample_count": 1}}))
    capsys.readouterr()
    assert main(["bound", "--config", str(cfg), "--out", str(tmp_path / "o"), *SMALL]) == 0
    rep = json.loads((tmp_path / "o" / "bound.json").read_text())
    assert rep["bound"] == 0.0 and rep["observed"] == 0.0
    assert "n/a" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(tmp_path, capsys):
    code, _ = run(tmp_path, "x", "train", "--set", "model.lambda=-1")
    assert code == 1 and "model.lambda" in capsys.readouterr().err
    code, _ = run(tmp_path, "x", "train", "--set", "propagation.mode=\"diag\"")
    assert code == 1 and "propagation.mode" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus"])
    assert info.value.code == 1
    assert run(tmp_path, "x", "train", "--set", "model.eta=1e300")[0] == 2
    code, out = run(tmp_path, "sm", "train", "--set", 'model.loss_kind="softmax"')
    assert code == 0
    assert run(tmp_path, "sm", "unlearn", "--model", str(out / "model.bin"),
               "--set", 'model.loss_kind="softmax"', "--set", 'unlearn.strategy="fisher_plus"')[0] == 3
    code, out = run(tmp_path, "one", "train", "--set", "split.train_fraction=0.01")
    assert code == 0
    assert run(tmp_path, "one", "unlearn", "--model", str(out / "model.bin"), "--set", "split.train_fraction=0.01",
               "--set", 'unlearn.delete={"degree_rank": {"order": "largest", "fraction": 0.5}}')[0] == 4
    assert run(tmp_path, "x", "unlearn", "--model", str(tmp_path / "missing.bin"))[0] == 5
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1


def test_log_level_from_environment(tmp_path):
    out = tmp_path / "o"
    cmd = [sys.executable, "-m", "graph_unlearn", "train", "--out", str(out), *SMALL]
    loud = subprocess.run(cmd, capture_output=True, text=True, env=dict(os.environ, UNLEARN_LOG="info"))
    assert loud.returncode == 0 and "INFO" in loud.stderr
    quiet = subprocess.run(cmd, capture_output=True, text=True, env=dict(os.environ, UNLEARN_LOG="error"))
    assert quiet.returncode == 0 and quiet.stderr == ""


def test_feature_noise_option(tmp_path):
    base = run(tmp_path, "plain", "train")[1]
    noisy = [run(tmp_path, f"n{k}", "train", "--set", "feature_noise=1e-3")[1] for k in range(2)]
    W0, W1, W2 = (load_model(p / "model.bin").W for p in (base, *noisy))
    assert W1.tobytes() == W2.tobytes() and not np.array_equal(W0, W1)
    code, _ = run(tmp_path, "x", "train", "--set", "feature_noise=-1")
    assert code == 1

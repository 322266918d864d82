import filecmp
import json
import re
import struct

import numpy as np
import pytest

from aoifl.cli import (
    EXIT_DIVERGENCE,
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VALIDATION,
    main,
)

SIM_TOML = """
[policy]
n = 100
k = 15
m = 10

[simulate]
policies = ["uniform", "markov"]
rounds = 3000
seed = 4
"""

TRAIN_TOML = """
[train]
seeds = [0, 1]
rounds = 6
local_epochs = 1
batch_size = 10
policies = ["uniform", "markov"]

[synthetic]
samples = 1000
test_samples = 200
"""


def same_tree(a, b) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# --- analyze / optimize ------------------------------------------------------

def test_analyze_paper_parameters(capsys, tmp_path):
    path = tmp_path / "report.json"
    code, out, _ = run(["analyze", "--n", 100, "--k", 15, "--m", 10, "--json", path], capsys)
    assert code == EXIT_OK
    assert "0.2222" in out and "37.7778" in out
    report = json.loads(path.read_text())
    assert report["variance_exact"] == "2/9"
    assert report["baseline_variance"] == pytest.approx(8500 / 225)
    assert report["stationary"][0] == pytest.approx(0.15)
    assert len(report["expected_return_time"]) == 11


def test_analyze_full_budget(capsys):
    code, out, _ = run(["analyze", "--n", 10, "--k", 10, "--m", 1], capsys)
    assert code == EXIT_OK
    assert "Var[X] = 0.0000" in out and "Var[X] = 0.0000" in out.split("random selection")[1]


def test_analyze_rejects_infeasible_policy(capsys):
    code, _, err = run(["analyze", "--n", 100, "--k", 15, "--m", 1, "--probs", "0,0.5"], capsys)
    assert code == EXIT_VALIDATION
    assert "residual" in err and "-3.666666667" in err


def test_analyze_custom_policy_ok(capsys):
    code, out, _ = run(["analyze", "--n", 4, "--k", 1, "--m", 1, "--probs", "0,1/3"], capsys)
    assert code == EXIT_OK and "(6)" in out


@pytest.mark.parametrize("argv", [
    ["analyze", "--n", 100, "--k", 15, "--m", 2, "--probs", "0,1"],
    ["analyze", "--n", 100, "--k", 15, "--m", 1, "--probs", "0,x"],
    ["analyze", "--n", 100, "--k", 15, "--m", 1, "--probs", "0,0"],
    ["analyze", "--n", 5, "--k", 6, "--m", 1],
    ["optimize", "--n", 5, "--k", 6, "--m", 1],
])
def test_validation_errors(argv, capsys):
    assert run(argv, capsys)[0] == EXIT_VALIDATION


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "--n", "100"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE


@pytest.mark.parametrize("n,k,m,probs,var", [
    (100, 15, 10, [0, 0, 0, 0, 0, 1 / 3, 1, 1, 1, 1, 1], 2 / 9),
    (100, 15, 3, [0, 0, 0, 3 / 11], 88 / 9),
    (8, 4, 1, [0, 1], 0.0),
])
def test_optimize(n, k, m, probs, var, capsys, tmp_path):
    path = tmp_path / "policy.json"
    code, _, _ = run(["optimize", "--n", n, "--k", k, "--m", m, "--out", path], capsys)
    assert code == EXIT_OK
    out = json.loads(path.read_text())
    np.testing.assert_allclose(out["probs"], probs, rtol=1e-15)
    assert out["min_variance"] == pytest.approx(var, abs=1e-15)


def test_optimize_verify(capsys):
    code, out, _ = run(["optimize", "--n", 7, "--k", 2, "--m", 2, "--verify",
                        "--resolution", 300], capsys)
    assert code == EXIT_OK
    verify = json.loads(out)["verify"]
    assert verify["pmf_matches"] and verify["grid_not_better"]
    assert abs(verify["grid_gap"]) < 1e-3


# --- simulate ----------------------------------------------------------------

def test_simulate_outputs(tmp_path, capsys):
    cfg = tmp_path / "sim.toml"
    cfg.write_text(SIM_TOML)
    code, out, _ = run(["simulate", cfg, "--out-dir", tmp_path / "runs"], capsys)
    assert code == EXIT_OK
    run_dir = tmp_path / "runs" / "simulate-n100-k15-m10-seed4"
    assert sorted(p.name for p in run_dir.iterdir()) == [
        "config.json", "hist_markov.csv", "hist_uniform.csv", "metrics.json", "table.txt",
    ]
    echo = json.loads((run_dir / "config.json").read_text())
    assert echo["policy"] == {"k": 15, "m": 10, "n": 100}
    assert echo["simulate"]["burn_in"] == 70
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert metrics["markov"]["peak_age_variance"] < 0.3
    assert metrics["uniform"]["peak_age_variance"] > 20
    hist = (run_dir / "hist_markov.csv").read_text().splitlines()
    assert hist[0] == "x,count" and {row.split(",")[0] for row in hist[1:]} <= {"6", "7"}
    assert "markov" in out


def test_simulate_is_deterministic(tmp_path, capsys):
    cfg = tmp_path / "sim.toml"
    cfg.write_text(SIM_TOML)
    for name, jobs in (("a", 1), ("b", 1), ("c", 2)):
        assert run(["simulate", cfg, "--out-dir", tmp_path / name, "--jobs", jobs],
                   capsys)[0] == EXIT_OK
    leaf = "simulate-n100-k15-m10-seed4"
    assert same_tree(tmp_path / "a" / leaf, tmp_path / "b" / leaf)
    assert same_tree(tmp_path / "a" / leaf, tmp_path / "c" / leaf)


def test_simulate_flag_overrides(tmp_path, capsys):
    cfg = tmp_path / "sim.toml"
    cfg.write_text(SIM_TOML)
    code, _, _ = run(["simulate", cfg, "--out-dir", tmp_path, "--seed", 9, "--rounds", 500,
                      "--policies", "oldest"], capsys)
    assert code == EXIT_OK
    echo = json.loads((tmp_path / "simulate-n100-k15-m10-seed9" / "config.json").read_text())
    assert echo["simulate"]["rounds"] == 500
    assert echo["simulate"]["policies"] == ["oldest"]


def test_simulate_zero_recorded_rounds(tmp_path, capsys):
    code, _, err = run(["simulate", "--out-dir", tmp_path, "--rounds", 70], capsys)
    assert code == EXIT_USAGE and "burn-in" in err
    assert not list(tmp_path.iterdir())


def test_simulate_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[policy]\nn = 100\nk = = 3\n")
    code, _, err = run(["simulate", bad, "--out-dir", tmp_path / "out"], capsys)
    assert code == EXIT_VALIDATION and "line 3" in err
    bad.write_text("[policy]\nbudget = 3\n")
    code, _, err = run(["simulate", bad, "--out-dir", tmp_path / "out"], capsys)
    assert code == EXIT_VALIDATION and "policy.budget" in err
    bad.write_text('[simulate]\npolicies = ["fastest"]\n')
    assert run(["simulate", bad, "--out-dir", tmp_path / "out"], capsys)[0] == EXIT_VALIDATION
    assert not (tmp_path / "out").exists()


def test_missing_config_leaves_nothing(tmp_path, capsys):
    out_dir = tmp_path / "runs"
    code, _, _ = run(["simulate", tmp_path / "nope.toml", "--out-dir", out_dir], capsys)
    assert code == EXIT_IO
    code, _, _ = run(["train", tmp_path / "nope.toml", "--out-dir", out_dir], capsys)
    assert code == EXIT_IO
    assert not out_dir.exists()


# --- train -------------------------------------------------------------------

TRAIN_LEAF = "train-synthetic-logistic-dirichlet-n100-k15-m10-seeds0-1"


def test_train_outputs(tmp_path, capsys):
    cfg = tmp_path / "train.toml"
    cfg.write_text(TRAIN_TOML)
    code, out, _ = run(["train", cfg, "--out-dir", tmp_path, "--target", 0.3], capsys)
    assert code == EXIT_OK
    run_dir = tmp_path / TRAIN_LEAF
    summary = json.loads((run_dir / "summary.json").read_text())
    assert set(summary["policies"]) == {"uniform", "markov"}
    for entry in summary["policies"].values():
        assert "mean_rounds_to_target" in entry
        assert entry["seeds"] == [0, 1]
    assert summary["target_accuracy"] == 0.3
    runs = sorted(p.name for p in (run_dir / "runs").iterdir())
    assert runs == ["markov-seed0.csv", "markov-seed1.csv", "uniform-seed0.csv",
                    "uniform-seed1.csv"]
    csv = (run_dir / "runs" / "uniform-seed0.csv").read_text().splitlines()
    assert csv[0] == "round,accuracy,loss,n_selected" and len(csv) == 7
    echo = json.loads((run_dir / "config.json").read_text())
    assert echo["train"]["target"] == 0.3 and "output" not in echo


def test_train_is_deterministic(tmp_path, capsys):
    cfg = tmp_path / "train.toml"
    cfg.write_text(TRAIN_TOML)
    for name, jobs in (("a", 1), ("b", 1), ("c", 2)):
        assert run(["train", cfg, "--out-dir", tmp_path / name, "--jobs", jobs],
                   capsys)[0] == EXIT_OK
    assert same_tree(tmp_path / "a" / TRAIN_LEAF, tmp_path / "b" / TRAIN_LEAF)
    assert same_tree(tmp_path / "a" / TRAIN_LEAF, tmp_path / "c" / TRAIN_LEAF)


def test_train_divergence_exit_code(tmp_path, capsys):
    cfg = tmp_path / "train.toml"
    cfg.write_text(TRAIN_TOML.replace("local_epochs = 1", "local_epochs = 1\nlr0 = 1e308"))
    code, _, err = run(["train", cfg, "--out-dir", tmp_path / "out"], capsys)
    assert code == EXIT_DIVERGENCE
    assert re.search(r"round \d+: non-finite", err)
    assert not (tmp_path / "out").exists()


def test_train_mnist_missing(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("AOIFL_DATA_DIR", raising=False)
    code, _, err = run(["train", "--task", "mnist", "--out-dir", tmp_path / "out"], capsys)
    assert code == EXIT_IO and "AOIFL_DATA_DIR" in err
    monkeypatch.setenv("AOIFL_DATA_DIR", str(tmp_path))
    code, _, err = run(["train", "--task", "mnist", "--out-dir", tmp_path / "out"], capsys)
    assert code == EXIT_IO and "train-images-idx3-ubyte" in err
    assert not (tmp_path / "out").exists()


def _fake_mnist(root, count, seed):
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 10
    pixels = np.zeros((count, 28, 28), dtype=np.uint8)
    for i, y in enumerate(labels):
        pixels[i, y, :] = 200  # one bright row per class
    pixels = np.clip(pixels + rng.integers(0, 40, pixels.shape), 0, 255).astype(np.uint8)
    return (struct.pack(">IIII", 0x803, count, 28, 28) + pixels.tobytes(),
            struct.pack(">II", 0x801, count) + labels.astype(np.uint8).tobytes())


def test_train_mnist_layout(tmp_path, capsys, monkeypatch):
    for prefix, count, seed in (("train", 1000, 0), ("t10k", 200, 1)):
        images, labels = _fake_mnist(tmp_path, count, seed)
        (tmp_path / f"{prefix}-images-idx3-ubyte").write_bytes(images)
        (tmp_path / f"{prefix}-labels-idx1-ubyte").write_bytes(labels)
    monkeypatch.setenv("AOIFL_DATA_DIR", str(tmp_path))
    cfg = tmp_path / "mnist.toml"
    cfg.write_text("[train]\nbatch_size = 10\n")
    code, _, _ = run(["train", cfg, "--task", "mnist", "--target", 0.9, "--model", "logistic",
                      "--rounds", 15, "--seeds", "0", "--out-dir", tmp_path / "out"], capsys)
    assert code == EXIT_OK
    summary = json.loads(
        (tmp_path / "out" / "train-mnist-logistic-dirichlet-n100-k15-m10-seeds0"
         / "summary.json").read_text())
    assert all(e["reached"] == 1 for e in summary["policies"].values())

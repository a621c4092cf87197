import hashlib
import json

import numpy as np
import pytest

from selfguide.cli import EXIT_CONFIG, EXIT_SAMPLE, EXIT_TRAIN, main
from selfguide.denoiser import load_checkpoint
from selfguide.rng import SeededRng
from selfguide.sampler import sample_unguided
from selfguide.schedules import build_schedule
from selfguide.toyworld import read_actions_csv


def _write(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(*argv):
    return main([str(a) for a in argv])


TINY_TRAIN = {
    "model": {"arch": "mlp", "depth": 1, "width": 16},
    "schedule": {"kind": "cosine", "K": 8},
    "train": {"steps": 40, "batch": 32, "lr": 1e-3, "seed": 5},
}


@pytest.fixture
def toy_dataset(tmp_path):
    cfg = _write(tmp_path / "gen.json",
                 {"data": {"kind": "toy", "distribution": "spiral",
                           "n": 400, "beta": 4.0, "seed": 1}})
    out = tmp_path / "data"
    assert _run("generate-data", "--config", cfg, "--out", out) == 0
    return out / "dataset.csv"


def test_generate_data_toy_outputs(tmp_path, toy_dataset):
    table = read_actions_csv(toy_dataset)
    assert table["actions"].shape == (400, 2)
    assert np.all(table["weights"] > 0)
    meta = json.loads((toy_dataset.parent / "metadata.json").read_text())
    assert meta["rows"] == 400 and meta["distribution"] == "spiral"
    assert "action_mean" in meta["normalization"]
    run = json.loads((toy_dataset.parent / "run.json").read_text())
    assert run["command"] == "generate-data" and "version" in run


def test_generate_data_beta_column(tmp_path):
    cfg = _write(tmp_path / "gen.json",
                 {"data": {"kind": "toy", "distribution": "moons", "n": 100,
                           "with_beta_column": True, "seed": 2}})
    assert _run("generate-data", "--config", cfg, "--out", tmp_path / "o") == 0
    table = read_actions_csv(tmp_path / "o" / "dataset.csv")
    assert "betas" in table and "weights" in table
    assert np.all((table["betas"] >= 0) & (table["betas"] <= 20))


def test_generate_data_bandit(tmp_path):
    cfg = _write(tmp_path / "gen.json",
                 {"data": {"kind": "bandit", "n": 250, "noise": 0.2,
                           "seed": 3}})
    assert _run("generate-data", "--config", cfg, "--out", tmp_path / "b") == 0
    lines = (tmp_path / "b" / "transitions.csv").read_text().splitlines()
    assert lines[0] == "s_1,s_2,a_1,a_2,r,s'_1,s'_2,done"
    assert len(lines) == 251


def test_unknown_config_keys_rejected(tmp_path):
    bad1 = _write(tmp_path / "bad1.json", {"dataa": {}})
    assert _run("bench", "--config", bad1, "--out", tmp_path / "x") == EXIT_CONFIG
    bad2 = _write(tmp_path / "bad2.json", {"sample": {"rho": 1, "rgo": 2}})
    assert _run("bench", "--config", bad2, "--out", tmp_path / "x") == EXIT_CONFIG
    assert _run("bench", "--config", tmp_path / "missing.json",
                "--out", tmp_path / "x") == EXIT_CONFIG


def _train_toy(tmp_path, toy_dataset, seed=5):
    cfg = dict(TINY_TRAIN)
    cfg["data"] = {"path": str(toy_dataset)}
    cfg_path = _write(tmp_path / f"train{seed}.json", cfg)
    out = tmp_path / f"run{seed}"
    code = _run("train", "--config", cfg_path, "--seed", seed, "--out", out)
    assert code == 0
    return out / "checkpoint.json"


def test_train_writes_artifacts_and_is_reproducible(tmp_path, toy_dataset):
    ck1 = _train_toy(tmp_path, toy_dataset, seed=5)
    trace = (ck1.parent / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "step,loss"
    assert len(trace) >= 2
    assert (ck1.parent / "config.json").exists()
    run = json.loads((ck1.parent / "run.json").read_text())
    assert "dataset" in run["inputs"]

    out2 = tmp_path / "repeat"
    cfg = dict(TINY_TRAIN)
    cfg["data"] = {"path": str(toy_dataset)}
    cfg_path = _write(tmp_path / "train_repeat.json", cfg)
    assert _run("train", "--config", cfg_path, "--seed", 5, "--out", out2) == 0
    h1 = hashlib.sha256(ck1.read_bytes()).hexdigest()
    h2 = hashlib.sha256((out2 / "checkpoint.json").read_bytes()).hexdigest()
    assert h1 == h2


def test_train_resume_from_checkpoint(tmp_path, toy_dataset):
    ck = _train_toy(tmp_path, toy_dataset, seed=7)
    cfg = dict(TINY_TRAIN)
    cfg["data"] = {"path": str(toy_dataset)}
    cfg_path = _write(tmp_path / "resume.json", cfg)
    out = tmp_path / "resumed"
    assert _run("train", "--config", cfg_path, "--seed", 7, "--out", out,
                "--checkpoint", ck) == 0
    assert (out / "checkpoint.json").exists()


def test_sample_rho_zero_matches_unguided_baseline(tmp_path, toy_dataset):
    ck_path = _train_toy(tmp_path, toy_dataset, seed=9)
    cfg_path = _write(tmp_path / "sample.json",
                      {"sample": {"n": 64, "rho": 0.0, "seed": 11}})
    out = tmp_path / "samples"
    assert _run("sample", "--config", cfg_path, "--out", out,
                "--checkpoint", ck_path) == 0
    rows = np.loadtxt(out / "samples.csv", delimiter=",", skiprows=1)
    ck = load_checkpoint(ck_path)
    sched = build_schedule("cosine", 8)
    ref = sample_unguided(ck.model, sched, 64, SeededRng(11, stream=7),
                          normalization=ck.normalization)
    np.testing.assert_array_equal(rows[:, 1:4], ref.z0)


def test_sample_rho_sweep_emits_one_csv_per_rho(tmp_path, toy_dataset):
    ck = _train_toy(tmp_path, toy_dataset, seed=13)
    cfg_path = _write(
        tmp_path / "sweep.json",
        {"sample": {"n": 16, "rho_sweep": [1, 5, 10, 15, 20, 25, 30],
                    "seed": 3}})
    out = tmp_path / "sweep_out"
    assert _run("sample", "--config", cfg_path, "--out", out,
                "--checkpoint", ck) == 0
    for rho in (1, 5, 10, 15, 20, 25, 30):
        assert (out / f"samples_rho{rho}.csv").exists()


def test_sample_metrics_against_toy_reference(tmp_path, toy_dataset):
    ck = _train_toy(tmp_path, toy_dataset, seed=15)
    cfg_path = _write(
        tmp_path / "metrics.json",
        {"data": {"distribution": "spiral", "beta": 4.0},
         "sample": {"n": 200, "rho": 1.0, "seed": 4, "metrics": True,
                    "reference_n": 2000}})
    out = tmp_path / "metrics_out"
    assert _run("sample", "--config", cfg_path, "--out", out,
                "--checkpoint", ck) == 0
    blob = json.loads((out / "metrics.json").read_text())
    assert "rho=1" in blob
    assert blob["rho=1"]["energy_distance"] >= 0.0


def test_offline_rl_pipeline_critic_then_denoiser(tmp_path):
    gen = _write(tmp_path / "gen.json",
                 {"data": {"kind": "bandit", "n": 600, "noise": 0.3,
                           "seed": 21}})
    assert _run("generate-data", "--config", gen, "--out", tmp_path / "d") == 0
    transitions = tmp_path / "d" / "transitions.csv"

    critic_cfg = _write(tmp_path / "critic.json", {
        "data": {"path": str(transitions)},
        "train": {"target": "critic", "steps": 30, "batch": 64,
                  "hidden": 32, "seed": 22}})
    assert _run("train", "--config", critic_cfg, "--out",
                tmp_path / "critic_run") == 0
    critic_ck = tmp_path / "critic_run" / "critic.json"
    trace = (tmp_path / "critic_run" / "loss_trace.csv").read_text()
    assert trace.splitlines()[0] == "step,v_loss,q_loss"

    dn_cfg = _write(tmp_path / "dn.json", {
        "data": {"path": str(transitions),
                 "critic_checkpoint": str(critic_ck),
                 "weight": {"kind": "smooth_expectile", "tau": 0.7}},
        "model": {"arch": "residual", "blocks": 2, "width": 32,
                  "head_width": 16, "conditioning": "state",
                  "state_dim": 2},
        "schedule": {"kind": "vp", "K": 15},
        "train": {"steps": 30, "batch": 32, "dropout": 0.1, "seed": 23}})
    assert _run("train", "--config", dn_cfg, "--out", tmp_path / "dn_run") == 0
    ck = tmp_path / "dn_run" / "checkpoint.json"

    s_cfg = _write(tmp_path / "s.json",
                   {"sample": {"n": 8, "rho": 1.0, "seed": 24,
                               "state": [0.2, -0.3]}})
    assert _run("sample", "--config", s_cfg, "--out", tmp_path / "s_out",
                "--checkpoint", ck) == 0
    rows = np.loadtxt(tmp_path / "s_out" / "samples.csv", delimiter=",",
                      skiprows=1)
    assert rows.shape == (8, 5)


def test_eval_compares_two_sample_files(tmp_path):
    rng = SeededRng(31)
    from selfguide.toyworld import write_actions_csv

    write_actions_csv(tmp_path / "x.csv", rng.gaussian((300, 2)))
    write_actions_csv(tmp_path / "y.csv", rng.gaussian((300, 2)))
    cfg = _write(tmp_path / "eval.json",
                 {"eval": {"samples": str(tmp_path / "x.csv"),
                           "reference": str(tmp_path / "y.csv"), "seed": 1}})
    assert _run("eval", "--config", cfg, "--out", tmp_path / "ev") == 0
    blob = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert blob["permutation_pvalue"] > 0.01


def test_bench_emits_timing_grid(tmp_path):
    cfg = _write(tmp_path / "bench.json",
                 {"bench": {"depths": [1, 2], "width": 24, "repetitions": 8,
                            "batch": 4, "K": 5, "dim": 3, "seed": 2}})
    out = tmp_path / "bench_out"
    assert _run("bench", "--config", cfg, "--out", out) == 0
    lines = (out / "timing.csv").read_text().splitlines()
    assert lines[0].startswith("depth,width,params,")
    rows = [dict(zip(lines[0].split(","), ln.split(","))) for ln in lines[1:]]
    assert len(rows) == 2
    assert int(rows[1]["params"]) > int(rows[0]["params"])
    assert float(rows[0]["guided_mean"]) > 0.0


def test_train_nan_exits_with_code_3(tmp_path):
    # a NaN action poisons the loss; training must abort with code 3
    from selfguide.toyworld import write_actions_csv

    actions = SeededRng(1).gaussian((64, 2))
    actions[7, 0] = np.nan
    bad_csv = tmp_path / "bad.csv"
    write_actions_csv(bad_csv, actions, weights=np.ones(64))
    cfg = _write(tmp_path / "explode.json", {
        "data": {"path": str(bad_csv)},
        "model": {"arch": "mlp", "depth": 1, "width": 8},
        "schedule": {"kind": "cosine", "K": 4},
        "train": {"steps": 50, "batch": 64, "seed": 1}})
    assert _run("train", "--config", cfg, "--out",
                tmp_path / "boom") == EXIT_TRAIN


def test_divergent_sampling_exits_with_code_4(tmp_path, toy_dataset):
    ck_path = _train_toy(tmp_path, toy_dataset, seed=33)
    payload = json.loads(ck_path.read_text())
    for name in payload["params"]:
        if name.startswith("out."):
            payload["params"][name]["data"] = \
                (np.array(payload["params"][name]["data"]) + 1e300).tolist()
    bad_ck = ck_path.parent / "bad.json"
    bad_ck.write_text(json.dumps(payload))
    cfg = _write(tmp_path / "div.json", {"sample": {"n": 16, "seed": 2}})
    assert _run("sample", "--config", cfg, "--out", tmp_path / "div_out",
                "--checkpoint", bad_ck) == EXIT_SAMPLE

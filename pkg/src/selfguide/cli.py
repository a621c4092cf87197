"""Experiment runner: generate-data, train, sample, eval and bench verbs.

Every command reads a JSON config (unknown keys rejected), echoes the
resolved config and input hashes into the output directory, and exits
with a scriptable code: 0 ok, 2 config error, 3 training failure,
4 sampling failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .critic import (
    CriticConfig,
    CriticError,
    WeightSpec,
    advantage,
    load_critic,
    save_critic,
    train_critic,
    weight_eval,
)
from .denoiser import (
    EnergyTrainData,
    MlpConfig,
    ResidualConfig,
    TrainConfig,
    TrainingError,
    augment_dataset,
    build_denoiser,
    load_checkpoint,
    prepare_fixed,
    save_checkpoint,
    train,
)
from .metrics import compare_samples
from .optim import OptimError
from .oracle import importance_resample_target
from .rng import SeededRng
from .sampler import GuidanceConfig, dump_samples_csv, sample, sample_unguided
from .schedules import build_schedule
from .toyworld import (
    BanditDatasetConfig,
    EnergySpec,
    ToyDistribution,
    make_bandit_dataset,
    mode_distance_energy,
    read_actions_csv,
    read_transitions_csv,
    sample_toy,
    toy_mode_set,
    weight_from_energy,
    write_actions_csv,
    write_transitions_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAIN = 3
EXIT_SAMPLE = 4


class ConfigError(ValueError):
    pass


_SCHEMA: dict[str, set[str]] = {
    "data": {"kind", "distribution", "n", "noise", "beta", "beta_range",
             "path", "weight", "critic_checkpoint", "with_beta_column",
             "seed"},
    "model": {"arch", "depth", "width", "blocks", "head_width",
              "conditioning", "time_dim", "state_dim"},
    "schedule": {"kind", "K"},
    "train": {"target", "steps", "batch", "lr", "dropout", "seed",
              "log_every", "gamma", "tau", "lam", "hidden"},
    "sample": {"n", "rho", "rho_sweep", "clamp", "sampler", "beta", "state",
               "seed", "metrics", "reference_n"},
    "eval": {"samples", "reference", "distribution", "seed"},
    "bench": {"depths", "widths", "width", "depth", "repetitions", "batch",
              "K", "dim", "seed"},
}
_WEIGHT_KEYS = {"kind", "tau", "beta", "clip_hi", "alpha"}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    for section, body in cfg.items():
        allowed = _SCHEMA.get(section)
        if allowed is None:
            raise ConfigError(f"unknown config section '{section}'")
        if not isinstance(body, dict):
            raise ConfigError(f"section '{section}' must be an object")
        unknown = set(body) - allowed
        if unknown:
            raise ConfigError(
                f"unknown keys in '{section}': {sorted(unknown)}")
        if section == "data" and isinstance(body.get("weight"), dict):
            extra = set(body["weight"]) - _WEIGHT_KEYS
            if extra:
                raise ConfigError(f"unknown keys in data.weight: {sorted(extra)}")
    return cfg


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_info(out: Path, command: str, cfg: dict, seed: int,
                    inputs: dict[str, str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    info = {
        "version": __version__,
        "command": command,
        "seed": seed,
        "inputs": {name: _sha256(p) for name, p in inputs.items()},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True))


def _seed_for(cfg_section: dict, override: int | None) -> int:
    if override is not None:
        return override
    return int(cfg_section.get("seed", 0))


def _energy_spec(data_cfg: dict, beta: float) -> EnergySpec:
    dist = ToyDistribution(data_cfg["distribution"],
                           noise=data_cfg.get("noise"))
    return EnergySpec(xi=mode_distance_energy(dist), beta=beta)


# -------------------------------------------------------------- commands

def cmd_generate_data(cfg: dict, out: Path, seed: int | None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    data = cfg.get("data", {})
    seed = _seed_for(data, seed)
    kind = data.get("kind", "toy")
    if kind == "bandit":
        tr = make_bandit_dataset(BanditDatasetConfig(
            n=int(data.get("n", 100_000)), noise=float(data.get("noise", 0.3)),
            seed=seed))
        write_transitions_csv(out / "transitions.csv", tr)
        meta = {"seed": seed, "rows": len(tr), "kind": "bandit",
                "reward_mean": float(tr.r.mean())}
    elif kind == "toy":
        dist = ToyDistribution(data["distribution"], noise=data.get("noise"))
        n = int(data.get("n", 200_000))
        actions = sample_toy(dist, n, SeededRng(seed, stream=1))
        weights = betas = None
        if data.get("with_beta_column"):
            lo, hi = data.get("beta_range", (0.0, 20.0))
            betas = lo + (hi - lo) * SeededRng(seed, stream=2).uniform((n,))
            xi = mode_distance_energy(dist)
            weights = np.exp(-betas * xi(actions))
        elif data.get("beta") is not None:
            spec = _energy_spec(data, float(data["beta"]))
            weights = weight_from_energy(actions, spec)
        write_actions_csv(out / "dataset.csv", actions, weights=weights,
                          betas=betas)
        meta = {
            "seed": seed, "rows": n, "kind": "toy",
            "distribution": dist.kind,
            "normalization": {
                "action_mean": actions.mean(axis=0).tolist(),
                "action_std": actions.std(axis=0).tolist(),
                "weight_mean": (float(np.mean(weights))
                                if weights is not None else 1.0),
            },
        }
    else:
        raise ConfigError(f"unknown data kind '{kind}'")
    (out / "metadata.json").write_text(json.dumps(meta, indent=2))
    _write_run_info(out, "generate-data", cfg, seed, {})
    return EXIT_OK


def _build_model_config(model_cfg: dict, dim: int, K: int, cond: str,
                        state_dim: int):
    arch = model_cfg.get("arch", "mlp")
    if arch == "mlp":
        return MlpConfig(
            dim=dim, K=K, depth=int(model_cfg.get("depth", 4)),
            width=int(model_cfg.get("width", 128)),
            time_dim=int(model_cfg.get("time_dim", 64)),
            conditioning=cond, state_dim=state_dim)
    if arch == "residual":
        return ResidualConfig(
            dim=dim, K=K, blocks=int(model_cfg.get("blocks", 3)),
            width=int(model_cfg.get("width", 256)),
            head_width=int(model_cfg.get("head_width", 256)),
            time_dim=int(model_cfg.get("time_dim", 64)),
            conditioning=cond, state_dim=state_dim)
    raise ConfigError(f"unknown architecture '{arch}'")


def _train_denoiser(cfg: dict, out: Path, seed: int | None,
                    resume: Path | None) -> int:
    data_cfg = cfg.get("data", {})
    model_cfg = cfg.get("model", {})
    sched_cfg = cfg.get("schedule", {})
    train_cfg = cfg.get("train", {})
    seed = _seed_for(train_cfg, seed)
    K = int(sched_cfg.get("K", 100))
    sched_kind = sched_cfg.get("kind", "cosine")
    cond = model_cfg.get("conditioning", "none")

    inputs: dict[str, str] = {}
    if cond == "state":
        tr = read_transitions_csv(data_cfg["path"])
        inputs["transitions"] = data_cfg["path"]
        critic_path = data_cfg["critic_checkpoint"]
        critic_state, _ = load_critic(critic_path)
        inputs["critic"] = critic_path
        spec = WeightSpec(**data_cfg.get("weight", {"kind": "smooth_expectile"}))
        weights = weight_eval(spec, advantage(critic_state, tr.s, tr.a))
        data = prepare_fixed(augment_dataset(tr.a, weights), states=tr.s)
        state_dim = tr.s.shape[1]
        dim = tr.a.shape[1] + 1
    else:
        table = read_actions_csv(data_cfg["path"])
        inputs["dataset"] = data_cfg["path"]
        actions = table["actions"]
        state_dim = 0
        dim = actions.shape[1] + 1
        if cond == "beta":
            dist = ToyDistribution(data_cfg["distribution"],
                                   noise=data_cfg.get("noise"))
            lo, hi = data_cfg.get("beta_range", (0.0, 20.0))
            data = EnergyTrainData(actions, mode_distance_energy(dist),
                                   beta_range=(float(lo), float(hi)))
        elif "weights" in table:
            data = prepare_fixed(augment_dataset(actions, table["weights"]))
        else:
            data = prepare_fixed(augment_dataset(actions, np.ones(len(actions))))

    tcfg = TrainConfig(
        K=K, schedule=sched_kind, batch=int(train_cfg.get("batch", 256)),
        lr=float(train_cfg.get("lr", 1e-4)),
        steps=int(train_cfg.get("steps", 20_000)),
        dropout=float(train_cfg.get("dropout", 0.0)), seed=seed,
        log_every=int(train_cfg.get("log_every", 100)))

    adam = None
    if resume is not None:
        ck = load_checkpoint(resume)
        model, adam = ck.model, ck.adam
        inputs["resume_checkpoint"] = str(resume)
    else:
        mc = _build_model_config(model_cfg, dim, K, cond, state_dim)
        model = build_denoiser(mc, rng=SeededRng(seed, stream=10))

    model, trace = train(data, tcfg, model=model, adam=adam)

    save_checkpoint(out / "checkpoint.json", model, data.normalization,
                    meta={"schedule": sched_kind, "seed": seed,
                          "steps": tcfg.steps,
                          "conditioning": cond},
                    adam=None)
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows(trace)
    _write_run_info(out, "train", cfg, seed, inputs)
    return EXIT_OK


def _train_critic_cmd(cfg: dict, out: Path, seed: int | None) -> int:
    data_cfg = cfg.get("data", {})
    train_cfg = cfg.get("train", {})
    seed = _seed_for(train_cfg, seed)
    tr = read_transitions_csv(data_cfg["path"])
    ccfg = CriticConfig(
        gamma=float(train_cfg.get("gamma", 0.99)),
        tau=float(train_cfg.get("tau", 0.7)),
        lam=float(train_cfg.get("lam", 0.005)),
        lr=float(train_cfg.get("lr", 3e-4)),
        batch=int(train_cfg.get("batch", 256)),
        steps=int(train_cfg.get("steps", 15_000)),
        hidden=int(train_cfg.get("hidden", 256)), seed=seed,
        log_every=int(train_cfg.get("log_every", 100)))
    state, traces = train_critic(tr, ccfg)
    save_critic(out / "critic.json", state, tr.s.shape[1], tr.a.shape[1],
                meta={"seed": seed})
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "v_loss", "q_loss"])
        writer.writerows(zip(traces["step"], traces["v_loss"],
                             traces["q_loss"]))
    _write_run_info(out, "train", cfg, seed, {"transitions": data_cfg["path"]})
    return EXIT_OK


def cmd_train(cfg: dict, out: Path, seed: int | None,
              checkpoint: Path | None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    target = cfg.get("train", {}).get("target", "denoiser")
    if target == "critic":
        return _train_critic_cmd(cfg, out, seed)
    if target != "denoiser":
        raise ConfigError(f"unknown train target '{target}'")
    return _train_denoiser(cfg, out, seed, checkpoint)


def _sample_once(model, norm, sched, n, rho, scfg, beta, rng):
    g = GuidanceConfig(rho=rho, clamp_eps=float(scfg.get("clamp", 1e-6)),
                       sampler_kind=scfg.get("sampler", "ddpm"))
    c = None
    if model.conditioning == "beta":
        c = beta
    elif model.conditioning == "state":
        state = scfg.get("state")
        if state is None:
            raise ConfigError("state-conditioned checkpoint needs sample.state")
        c = np.asarray(state, dtype=np.float64)[None, :]
    return sample(model, sched, n, rng, c=c, g=g, normalization=norm)


def cmd_sample(cfg: dict, out: Path, seed: int | None,
               checkpoint: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    scfg = cfg.get("sample", {})
    data_cfg = cfg.get("data", {})
    seed = _seed_for(scfg, seed)
    ck = load_checkpoint(checkpoint)
    sched = build_schedule(ck.meta.get("schedule", "cosine"), ck.model.config.K)
    n = int(scfg.get("n", 10_000))
    beta = scfg.get("beta")
    rhos = scfg.get("rho_sweep") or [float(scfg.get("rho", 1.0))]

    worst_divergence = 0.0
    metrics_blob = {}
    for rho in rhos:
        rng = SeededRng(seed, stream=int(round(1000 * rho)) + 7)
        output = _sample_once(ck.model, ck.normalization, sched, n, float(rho),
                              scfg, beta, rng)
        tag = f"_rho{rho:g}" if len(rhos) > 1 else ""
        dump_samples_csv(out / f"samples{tag}.csv", output)
        divergence = len(output.diagnostics["aborted_chains"]) / n
        worst_divergence = max(worst_divergence, divergence)

        if scfg.get("metrics") and "distribution" in data_cfg:
            dist = ToyDistribution(data_cfg["distribution"],
                                   noise=data_cfg.get("noise"))
            ref_n = int(scfg.get("reference_n", 20_000))
            pool = sample_toy(dist, ref_n, SeededRng(seed, stream=3))
            wbeta = beta if beta is not None else data_cfg.get("beta")
            if wbeta:
                spec = _energy_spec(data_cfg, float(wbeta))
                target = importance_resample_target(
                    pool, weight_from_energy(pool, spec), n,
                    SeededRng(seed, stream=4))
            else:
                target = pool[:n] if ref_n >= n else pool
            modes = None
            if dist.kind in ("eight_gaussians", "checkerboard"):
                modes = toy_mode_set(dist)
            ok = np.isfinite(output.actions).all(axis=1)
            report = compare_samples(output.actions[ok], target,
                                     SeededRng(seed, stream=5), modes=modes)
            metrics_blob[f"rho={rho:g}"] = json.loads(report.to_json())

    if metrics_blob:
        (out / "metrics.json").write_text(json.dumps(metrics_blob, indent=2))
    _write_run_info(out, "sample", cfg, seed, {"checkpoint": str(checkpoint)})
    if worst_divergence > 0.01:
        print(f"sampling failure: {100 * worst_divergence:.1f}% of chains "
              f"diverged", file=sys.stderr)
        return EXIT_SAMPLE
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path, seed: int | None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    ecfg = cfg.get("eval", {})
    seed = _seed_for(ecfg, seed)
    samples = read_actions_csv(ecfg["samples"])["actions"]
    reference = read_actions_csv(ecfg["reference"])["actions"]
    modes = None
    if "distribution" in ecfg:
        modes = toy_mode_set(ToyDistribution(ecfg["distribution"]))
    report = compare_samples(samples, reference, SeededRng(seed, stream=6),
                             modes=modes)
    (out / "metrics.json").write_text(report.to_json())
    _write_run_info(out, "eval", cfg, seed,
                    {"samples": ecfg["samples"], "reference": ecfg["reference"]})
    return EXIT_OK


def _bench_cell(dim: int, depth: int, width: int, K: int, reps: int,
                group: int, seed: int) -> dict:
    from .sampler import GuidanceConfig as GC

    mc = MlpConfig(dim=dim, K=K, depth=depth, width=width)
    model = build_denoiser(mc, rng=SeededRng(seed, stream=depth * 131 + width))
    # give the zero-initialized head realistic magnitudes for the timing
    rng = SeededRng(seed, stream=77)
    model.params["out.weight"] = 0.05 * rng.gaussian(
        model.params["out.weight"].shape)
    sched = build_schedule("vp", K)
    groups = max(1, reps // group)
    times = {"guided": [], "unguided": []}
    for mode in ("unguided", "guided"):
        for i in range(groups):
            chain_rng = SeededRng(seed, stream=1000 + i)
            t0 = time.perf_counter()
            if mode == "guided":
                sample(model, sched, group, chain_rng, g=GC(rho=1.0))
            else:
                sample_unguided(model, sched, group, chain_rng)
            times[mode].append((time.perf_counter() - t0) / group)
    return {
        "depth": depth, "width": width, "params": model.param_count(),
        "repetitions": groups * group, "batch": group,
        "unguided_mean": float(np.mean(times["unguided"])),
        "unguided_std": float(np.std(times["unguided"])),
        "guided_mean": float(np.mean(times["guided"])),
        "guided_std": float(np.std(times["guided"])),
    }


def cmd_bench(cfg: dict, out: Path, seed: int | None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    bcfg = cfg.get("bench", {})
    seed = _seed_for(bcfg, seed)
    K = int(bcfg.get("K", 15))
    dim = int(bcfg.get("dim", 3))
    reps = int(bcfg.get("repetitions", 10_000))
    group = int(bcfg.get("batch", 64))
    cells = []
    for depth in bcfg.get("depths", []):
        cells.append((int(depth), int(bcfg.get("width", 2056))))
    for width in bcfg.get("widths", []):
        cells.append((int(bcfg.get("depth", 4)), int(width)))
    if not cells:
        cells = [(int(bcfg.get("depth", 4)), int(bcfg.get("width", 2056)))]
    rows = [_bench_cell(dim, d, w, K, reps, group, seed) for d, w in cells]
    fields = ["depth", "width", "params", "repetitions", "batch",
              "unguided_mean", "unguided_std", "guided_mean", "guided_std"]
    with open(out / "timing.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    _write_run_info(out, "bench", cfg, seed, {})
    return EXIT_OK


# ------------------------------------------------------------------ main

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="selfguide",
        description="Joint data/weight diffusion with self-guided sampling")
    parser.add_argument("command",
                        choices=["generate-data", "train", "sample", "eval",
                                 "bench"])
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--checkpoint", type=Path, default=None)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.command == "generate-data":
            return cmd_generate_data(cfg, args.out, args.seed)
        if args.command == "train":
            return cmd_train(cfg, args.out, args.seed, args.checkpoint)
        if args.command == "sample":
            if args.checkpoint is None:
                raise ConfigError("sample requires --checkpoint")
            return cmd_sample(cfg, args.out, args.seed, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, args.seed)
        return cmd_bench(cfg, args.out, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (KeyError, FileNotFoundError) as exc:
        print(f"config error: missing {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, CriticError, OptimError) as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())

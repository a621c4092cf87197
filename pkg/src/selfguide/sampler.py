"""Sampling from the weighted target with guidance from the model itself.

The joint model predicts noise for the augmented vector z = [a, w]. Its
own clean-data estimate exposes the expected weight, and the gradient of
that estimate's log is exactly the score correction needed to move from
the base distribution to the weighted target. One vector-Jacobian product
per step therefore replaces any external guidance network.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .denoiser import Normalization
from .rng import SeededRng
from .schedules import NoiseSchedule


class GuidanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    """Knobs of the guided sampler.

    ``rho`` scales the guidance score (1 is the unbiased setting; larger
    sharpens the target). ``clamp_eps`` floors the predicted weight before
    the log so imperfect models cannot feed log a non-positive value.
    """

    rho: float = 1.0
    clamp_eps: float = 1e-6
    sampler_kind: str = "ddpm"
    K: int | None = None
    # clip clean-data estimates to the training data's channel range when
    # the normalization provides one (bias-free for a perfect model)
    clip_to_data: bool = True

    def __post_init__(self):
        if self.rho < 0.0:
            raise ValueError("guidance scale rho must be >= 0")
        if self.clamp_eps <= 0.0:
            raise ValueError("clamp_eps must be positive")
        if self.sampler_kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind '{self.sampler_kind}'")


def extract_w(z: np.ndarray):
    """The weight coordinate of z = [a, w]; linear in z."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("augmented vectors need width >= 2")
    out = z[..., -1]
    return float(out) if out.ndim == 0 else out


def _clip_bounds(normalization: Normalization | None, enabled: bool):
    if not enabled or normalization is None \
            or normalization.channel_lo is None:
        return None
    return normalization.channel_lo, normalization.channel_hi


def _guidance(model, schedule: NoiseSchedule, z_k: np.ndarray, k: int, c,
              clamp_eps: float):
    """Shared core: returns (eps value, grad of log w0_hat, clamp mask)."""
    v = ad.leaf(z_k, name="z_k")
    eps = model.predict_eps(v, k, c)
    zhat0 = schedule.data_prediction(v, eps, k)
    w_col = ad.slice_cols(zhat0, model.dim - 1, model.dim, name="w0_hat")
    w_val = ad.value_of(w_col)[:, 0]
    clamped = ad.maximum_floor(w_col, clamp_eps, name="w0_clamped")
    objective = ad.reduce_sum(ad.log(clamped))
    grad = ad.vjp(objective)[v]
    return ad.value_of(eps), grad, w_val


def self_guidance_grad(model, schedule: NoiseSchedule, z_k: np.ndarray,
                       k: int, c=None, clamp_eps: float = 1e-6) -> np.ndarray:
    """Gradient of log max(w0_hat, clamp_eps) with respect to z_k.

    w0_hat is the weight coordinate of the model's clean-data estimate at
    step k; the gradient runs through the full noise prediction via one
    vector-Jacobian product and covers every coordinate of z_k.
    """
    z = np.asarray(z_k, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    _, grad, w_val = _guidance(model, schedule, zb, k, c, clamp_eps)
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad).all(axis=1))[0])
        raise GuidanceError(
            f"non-finite guidance gradient at k={k}, w0_hat={w_val[bad]!r}")
    return grad[0] if single else grad


def guided_eps(model, schedule: NoiseSchedule, z_k: np.ndarray, k: int,
               c=None, g: GuidanceConfig = GuidanceConfig()) -> np.ndarray:
    """Noise prediction shifted by the scaled guidance score.

    eps_hat = eps(z_k, k, c) - rho * sigma_k * d/dz_k log w0_hat. With
    rho = 0 this reduces bit-exactly to the raw prediction.
    """
    z = np.asarray(z_k, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    eps, grad, _ = _guidance(model, schedule, zb, k, c, g.clamp_eps)
    out = eps - (g.rho * schedule.sigma[k]) * grad
    return out[0] if single else out


@dataclass
class SamplerOutput:
    """A batch of generated samples plus guidance diagnostics."""

    z0: np.ndarray            # (n, d+1) de-normalized [a, w_hat] rows
    clamp_hits: np.ndarray    # (n,) steps at which the weight floor bound
    diagnostics: dict = field(default_factory=dict)

    @property
    def actions(self) -> np.ndarray:
        return self.z0[:, :-1]

    @property
    def w_hat(self) -> np.ndarray:
        return self.z0[:, -1]


def _finalize(z: np.ndarray, clamp_hits: np.ndarray, aborted: dict,
              normalization: Normalization | None, c, K: int,
              t0: float) -> SamplerOutput:
    out = z
    if normalization is not None:
        beta = c if normalization.beta_grid is not None else None
        out = normalization.denormalize(z, beta=beta)
        out[~np.isfinite(z).all(axis=1)] = np.nan
    return SamplerOutput(
        z0=out, clamp_hits=clamp_hits,
        diagnostics={"steps": K, "wall_time": time.perf_counter() - t0,
                     "aborted_chains": sorted(aborted),
                     "abort_step": aborted})


def sample(model, schedule: NoiseSchedule, n: int, rng: SeededRng, c=None,
           g: GuidanceConfig = GuidanceConfig(),
           normalization: Normalization | None = None) -> SamplerOutput:
    """Guided ancestral sampling of n chains, ordered by chain index.

    Chains run as one vectorized batch; a chain whose state turns
    non-finite is reported in the diagnostics and emitted as NaN rows,
    leaving the sample count intact.
    """
    if g.K is not None and g.K != schedule.K:
        raise GuidanceError(f"guidance K={g.K} != schedule K={schedule.K}")
    t0 = time.perf_counter()
    bounds = _clip_bounds(normalization, g.clip_to_data)
    z = rng.gaussian((n, model.dim))
    clamp_hits = np.zeros(n, dtype=np.int64)
    aborted: dict[int, int] = {}
    # diverged chains keep flowing as NaN rows and are reported at the end
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(schedule.K, 0, -1):
            eps, grad, w_val = _guidance(model, schedule, z, k, c, g.clamp_eps)
            eps_hat = eps - (g.rho * schedule.sigma[k]) * grad
            clamp_hits += w_val < g.clamp_eps
            zhat0 = schedule.data_prediction(z, eps_hat, k)
            if bounds is not None:
                zhat0 = np.clip(zhat0, bounds[0], bounds[1])
            z = schedule.posterior_step(z, zhat0, k, rng=rng,
                                        kind=g.sampler_kind)
            bad = ~np.isfinite(z).all(axis=1)
            for idx in np.flatnonzero(bad):
                aborted.setdefault(int(idx), k)
    return _finalize(z, clamp_hits, aborted, normalization, c, schedule.K, t0)


def sample_unguided(model, schedule: NoiseSchedule, n: int, rng: SeededRng,
                    c=None, sampler_kind: str = "ddpm",
                    normalization: Normalization | None = None,
                    clip_to_data: bool = True) -> SamplerOutput:
    """Plain ancestral sampling of the base distribution (no guidance).

    Consumes random numbers in exactly the same order as :func:`sample`
    and applies the same clean-estimate clip, so a shared seed makes the
    rho = 0 guided run bit-identical.
    """
    t0 = time.perf_counter()
    bounds = _clip_bounds(normalization, clip_to_data)
    z = rng.gaussian((n, model.dim))
    aborted: dict[int, int] = {}
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(schedule.K, 0, -1):
            eps = model.predict_eps(z, k, c)
            zhat0 = schedule.data_prediction(z, eps, k)
            if bounds is not None:
                zhat0 = np.clip(zhat0, bounds[0], bounds[1])
            z = schedule.posterior_step(z, zhat0, k, rng=rng,
                                        kind=sampler_kind)
            bad = ~np.isfinite(z).all(axis=1)
            for idx in np.flatnonzero(bad):
                aborted.setdefault(int(idx), k)
    return _finalize(z, np.zeros(n, dtype=np.int64), aborted, normalization,
                     c, schedule.K, t0)


def sample_swg_r(model, schedule: NoiseSchedule,
                 critic_weight_fn: Callable[[np.ndarray], np.ndarray],
                 M: int, rng: SeededRng, c=None,
                 g: GuidanceConfig = GuidanceConfig(),
                 normalization: Normalization | None = None,
                 selection: str = "argmax",
                 use_w_channel: bool = False) -> np.ndarray:
    """Draw M guided candidates, keep the best one.

    Candidate quality comes from the external weight evaluator applied to
    the generated actions (bind any state into the callable); the diffused
    weight channel is available as a diagnostic via ``use_w_channel``.
    Ties resolve to the lowest candidate index.
    """
    if M < 1:
        raise ValueError("candidate count M must be >= 1")
    out = sample(model, schedule, M, rng, c=c, g=g,
                 normalization=normalization)
    actions = out.actions
    scores = out.w_hat if use_w_channel else np.asarray(
        critic_weight_fn(actions), dtype=np.float64).reshape(-1)
    if scores.shape != (M,):
        raise ValueError("weight evaluator must score every candidate")
    if selection == "argmax":
        pick = int(np.argmax(scores))
    elif selection == "categorical":
        if np.any(scores < 0) or scores.sum() <= 0:
            raise ValueError("categorical selection needs nonnegative, "
                             "not all-zero scores")
        cdf = np.cumsum(scores / scores.sum())
        cdf[-1] = 1.0
        pick = int(np.searchsorted(cdf, rng.uniform(()), side="right"))
    else:
        raise ValueError(f"unknown selection rule '{selection}'")
    return actions[pick]


def dump_samples_csv(path, output: SamplerOutput) -> None:
    """One row per sample: chain_id, a_1..a_d, w_hat, clamp_hits."""
    n, width = output.z0.shape
    header = (["chain_id"] + [f"a_{i + 1}" for i in range(width - 1)]
              + ["w_hat", "clamp_hits"])
    table = np.column_stack([np.arange(n), output.z0,
                             output.clamp_hits.astype(np.float64)])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, table, delimiter=",", fmt="%.17g")

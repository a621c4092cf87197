"""Noise schedules, forward corruption and reverse-step posteriors.

A schedule stores coefficient pairs (alpha_k, sigma_k) for k = 0..K with
alpha_0 = 1, sigma_0 = 0 and the variance-preserving identity
alpha_k^2 + sigma_k^2 = 1 at every step. Corrupting clean data follows
z_k = alpha_k z_0 + sigma_k eps, and a noise prediction eps_hat is inverted
back to a clean-data estimate via (z_k - sigma_k eps_hat) / alpha_k.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .rng import SeededRng

COSINE_SHIFT = 0.008
COSINE_ABAR_FLOOR = 1e-5
VP_BETA_MIN = 0.1
VP_BETA_MAX = 20.0
ALPHA_DIV_GUARD = 1e-8


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    K: int
    alpha: np.ndarray  # (K+1,)
    sigma: np.ndarray  # (K+1,)

    def __post_init__(self):
        if self.K < 1:
            raise ScheduleError("K must be >= 1")
        if self.alpha.shape != (self.K + 1,) or self.sigma.shape != (self.K + 1,):
            raise ScheduleError("alpha/sigma must have K+1 entries")
        if not (self.alpha[0] == 1.0 and self.sigma[0] == 0.0):
            raise ScheduleError("schedule must start at (alpha, sigma) = (1, 0)")
        if np.any(np.diff(self.alpha) >= 0):
            raise ScheduleError("alpha must be strictly decreasing in k")
        if np.any(np.diff(self.sigma) <= 0):
            raise ScheduleError("sigma must be strictly increasing in k")
        vp = self.alpha ** 2 + self.sigma ** 2
        if np.max(np.abs(vp - 1.0)) > 1e-12:
            raise ScheduleError("alpha^2 + sigma^2 = 1 violated beyond 1e-12")
        if self.alpha[self.K] > 0.05:
            raise ScheduleError("alpha_K must be <= 0.05")

    def forward_noise(self, z0: np.ndarray, k: int, eps: np.ndarray) -> np.ndarray:
        """Corrupt clean data: z_k = alpha_k z0 + sigma_k eps."""
        z0 = np.asarray(z0, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != z0.shape:
            raise ScheduleError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
        self._check_step(k, low=0)
        return self.alpha[k] * z0 + self.sigma[k] * eps

    def forward_noise_batch(self, z0: np.ndarray, ks: np.ndarray,
                            eps: np.ndarray) -> np.ndarray:
        """Row-wise corruption with a per-row step index."""
        a = self.alpha[ks][:, None]
        s = self.sigma[ks][:, None]
        return a * z0 + s * eps

    def data_prediction(self, z_k, eps_hat, k: int):
        """Invert a noise prediction: (z_k - sigma_k eps_hat) / alpha_k.

        Works on plain arrays or autodiff Vars (the arithmetic routes
        through whatever operators the operands define).
        """
        self._check_step(k)
        a = self.alpha[k]
        if a < ALPHA_DIV_GUARD:
            raise ScheduleError(f"alpha_{k} = {a:.3e} below division guard")
        return (z_k - self.sigma[k] * eps_hat) * (1.0 / a)

    def posterior_step(self, z_k: np.ndarray, zhat0: np.ndarray, k: int,
                       rng: SeededRng | None = None, kind: str = "ddpm") -> np.ndarray:
        """One reverse step from z_k toward z_{k-1}.

        ``ddpm`` draws from the forward-process posterior (deterministic at
        k = 1 where the posterior variance vanishes); ``ddim`` is the
        deterministic variance-free update.
        """
        self._check_step(k)
        z_k = np.asarray(z_k, dtype=np.float64)
        zhat0 = np.asarray(zhat0, dtype=np.float64)
        a_k, a_p = self.alpha[k], self.alpha[k - 1]
        s2_k, s2_p = self.sigma[k] ** 2, self.sigma[k - 1] ** 2
        if kind == "ddim":
            eps_eff = (z_k - a_k * zhat0) / self.sigma[k]
            return a_p * zhat0 + self.sigma[k - 1] * eps_eff
        if kind != "ddpm":
            raise ScheduleError(f"unknown sampler kind '{kind}'")
        r = a_k / a_p
        s2 = s2_k - r * r * s2_p
        if s2 < -1e-12:
            raise ScheduleError(
                f"inconsistent schedule at k={k}: sigma_k^2 - r^2 sigma_(k-1)^2 "
                f"= {s2:.3e} < 0")
        s2 = max(s2, 0.0)
        mean = (r * s2_p / s2_k) * z_k + (a_p * s2 / s2_k) * zhat0
        var = s2_p * s2 / s2_k
        if var <= 0.0 or k == 1:
            return mean
        if rng is None:
            raise ScheduleError("ddpm posterior_step needs an rng for k > 1")
        return mean + np.sqrt(var) * rng.gaussian(mean.shape)

    def _check_step(self, k: int, low: int = 1) -> None:
        if not (low <= k <= self.K):
            raise ScheduleError(f"step k={k} outside [{low}, {self.K}]")

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "alpha", "sigma"])
            for k in range(self.K + 1):
                writer.writerow([k, repr(float(self.alpha[k])),
                                 repr(float(self.sigma[k]))])


def build_cosine(K: int) -> NoiseSchedule:
    """Cosine schedule: abar(k) = f(k)/f(0) with a squared-cosine ramp.

    abar is floored at 1e-5 so the clean-data inversion stays well
    conditioned at k = K.
    """
    if K < 1:
        raise ScheduleError("K must be >= 1")
    k = np.arange(K + 1, dtype=np.float64)
    f = np.cos(((k / K + COSINE_SHIFT) / (1.0 + COSINE_SHIFT)) * np.pi / 2.0) ** 2
    abar = np.maximum(f / f[0], COSINE_ABAR_FLOOR)
    abar[0] = 1.0
    alpha = np.sqrt(abar)
    sigma = np.sqrt(1.0 - abar)
    return NoiseSchedule(kind="cosine", K=K, alpha=alpha, sigma=sigma)


def build_vp(K: int) -> NoiseSchedule:
    """Variance-preserving schedule evaluated on the continuous-time curve.

    alpha(t) = exp(-t^2 (b_max - b_min)/4 - t b_min/2) at t = k/K, so
    different K share one curve.
    """
    if K < 1:
        raise ScheduleError("K must be >= 1")
    t = np.arange(K + 1, dtype=np.float64) / K
    alpha = np.exp(-0.25 * t * t * (VP_BETA_MAX - VP_BETA_MIN)
                   - 0.5 * t * VP_BETA_MIN)
    sigma = np.sqrt(1.0 - alpha ** 2)
    return NoiseSchedule(kind="vp", K=K, alpha=alpha, sigma=sigma)


def build_schedule(kind: str, K: int) -> NoiseSchedule:
    if kind == "cosine":
        return build_cosine(K)
    if kind == "vp":
        return build_vp(K)
    raise ScheduleError(f"unknown schedule kind '{kind}'")

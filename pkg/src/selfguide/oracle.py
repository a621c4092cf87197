"""Closed-form verification oracles.

Three independent ways to pin down what a correct implementation must
produce at desk scale:

* :class:`EmpiricalDenoiser` - the analytic minimizer of the
  noise-prediction training loss for a finite dataset. Its posterior over
  dataset atoms is a softmax of Gaussian scores, so posterior means, noise
  predictions and guidance gradients are exact.
* :func:`grid_intractable_score` - direct numerical integration of the
  expected weight under the clean-data posterior, differentiated by
  central differences. Shares no code path with the autodiff route.
* :func:`importance_resample_target` - self-normalized categorical
  resampling of a sample pool by weight, the ground truth for any
  weighted-target sampler.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .rng import SeededRng
from .schedules import NoiseSchedule


class OracleError(ValueError):
    pass


class GridResolutionError(OracleError):
    """The quadrature grid failed its own refinement self-check."""


class EmpiricalDenoiser:
    """Exact noise predictor for an empirical (finite atom) dataset.

    ``data`` holds augmented samples, one row per atom, after whatever
    normalization the training pipeline applies; the last column is the
    weight channel and must be positive. ``predict_eps`` runs on plain
    arrays or on autodiff Vars, so the same guidance code that drives a
    trained network drives this oracle.
    """

    conditioning = "none"

    def __init__(self, data: np.ndarray, schedule: NoiseSchedule):
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if data.shape[0] < 1:
            raise OracleError("empirical dataset must contain at least one atom")
        if data.shape[1] >= 2 and np.any(data[:, -1] <= 0.0):
            raise OracleError("weight channel of the empirical dataset must be positive")
        self.data = data
        self.schedule = schedule
        self._sq_norms = np.sum(data * data, axis=1)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def _coeffs(self, k: int) -> tuple[float, float]:
        if not (1 <= k <= self.schedule.K):
            raise OracleError(f"step k={k} outside [1, {self.schedule.K}]")
        return float(self.schedule.alpha[k]), float(self.schedule.sigma[k])

    def posterior_weights(self, z_k: np.ndarray, k: int) -> np.ndarray:
        """Softmax responsibilities r_i of each atom given z_k (stable)."""
        a, s = self._coeffs(k)
        z = np.atleast_2d(np.asarray(z_k, dtype=np.float64))
        d2 = (
            np.sum(z * z, axis=1)[:, None]
            - 2.0 * a * (z @ self.data.T)
            + a * a * self._sq_norms[None, :]
        )
        scores = -d2 / (2.0 * s * s)
        scores -= scores.max(axis=1, keepdims=True)
        r = np.exp(scores)
        r /= r.sum(axis=1, keepdims=True)
        return r if np.ndim(z_k) == 2 else r[0]

    def exact_posterior_mean(self, z_k: np.ndarray, k: int) -> np.ndarray:
        """E[z_0 | z_k] under the empirical clean-data distribution."""
        r = np.atleast_2d(self.posterior_weights(z_k, k))
        mean = r @ self.data
        return mean if np.ndim(z_k) == 2 else mean[0]

    def exact_eps(self, z_k: np.ndarray, k: int) -> np.ndarray:
        """The optimal noise prediction (z_k - alpha_k E[z0|z_k]) / sigma_k."""
        a, s = self._coeffs(k)
        z = np.asarray(z_k, dtype=np.float64)
        return (z - a * self.exact_posterior_mean(z, k)) / s

    def predict_eps(self, z_k, k: int, c=None, train_mode: bool = False,
                    rng: SeededRng | None = None):
        """Noise prediction as a recorded graph when ``z_k`` is a Var.

        Per-row constants in the Gaussian scores are dropped: the softmax
        and its input gradient are unchanged, and the kernel stays well
        scaled without a log-sum-exp pass.
        """
        a, s = self._coeffs(k)
        if not isinstance(z_k, ad.Var):
            return self.exact_eps(z_k, k)
        scores = ad.sub(
            ad.matmul(z_k, self.data.T * (a / (s * s)), name="atom_scores"),
            (a * a) * self._sq_norms / (2.0 * s * s),
        )
        shift = np.max(ad.stop_gradient(scores), axis=1, keepdims=True)
        kern = ad.exp(ad.sub(scores, shift))
        resp = ad.div(kern, ad.reduce_sum(kern, axis=1, keepdims=True))
        mean = ad.matmul(resp, self.data, name="posterior_mean")
        return ad.mul(ad.sub(z_k, ad.mul(mean, a)), 1.0 / s, name="exact_eps")


@dataclass(frozen=True)
class SupportMeasure:
    """A quadrature measure over the clean-data support.

    ``points`` are support locations in the same space as z_k, ``masses``
    are positive quadrature masses (any overall scale), and ``weights``
    are the weight-function values at the points.
    """

    points: np.ndarray   # (M, dim)
    masses: np.ndarray   # (M,)
    weights: np.ndarray  # (M,)

    def __post_init__(self):
        if self.points.ndim != 2 or len(self.masses) != len(self.points) \
                or len(self.weights) != len(self.points):
            raise OracleError("measure arrays must share their leading extent")
        if np.any(self.masses < 0.0):
            raise OracleError("quadrature masses must be nonnegative")


def measure_from_dataset(z_data: np.ndarray) -> SupportMeasure:
    """Atoms of an augmented dataset; the weight values are its last column."""
    z = np.atleast_2d(np.asarray(z_data, dtype=np.float64))
    masses = np.full(len(z), 1.0 / len(z))
    return SupportMeasure(points=z, masses=masses, weights=z[:, -1].copy())


def _simpson_weights(n: int) -> np.ndarray:
    if n < 3 or n % 2 == 0:
        raise OracleError("Simpson quadrature needs an odd point count >= 3")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


def measure_from_grid(xs: np.ndarray, ys: np.ndarray,
                      density: Callable | np.ndarray,
                      weight: Callable | np.ndarray,
                      augment: bool = True) -> SupportMeasure:
    """Simpson-rule measure for a continuous 2-D density on a tensor grid.

    With ``augment`` the support points are [a, w(a)] triples matching an
    augmented model; otherwise they are the raw 2-D grid locations.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts2d = np.column_stack([gx.ravel(), gy.ravel()])
    dens = density(pts2d) if callable(density) else np.asarray(density).ravel()
    wvals = weight(pts2d) if callable(weight) else np.asarray(weight).ravel()
    if dens.shape != (len(pts2d),) or wvals.shape != (len(pts2d),):
        raise OracleError("density/weight grids do not match the tensor grid")
    hx = (xs[-1] - xs[0]) / (len(xs) - 1)
    hy = (ys[-1] - ys[0]) / (len(ys) - 1)
    quad = np.outer(_simpson_weights(len(xs)) * hx,
                    _simpson_weights(len(ys)) * hy).ravel()
    points = np.column_stack([pts2d, wvals]) if augment else pts2d
    return SupportMeasure(points=points, masses=quad * dens, weights=wvals)


def expected_weight(measure: SupportMeasure, schedule: NoiseSchedule,
                    z_k: np.ndarray, k: int) -> float:
    """E[w | z_k]: the weight averaged under the clean-data posterior."""
    return float(np.exp(_log_expected_weight(measure, schedule,
                                             np.asarray(z_k, float), k)))


def _log_expected_weight(measure: SupportMeasure, schedule: NoiseSchedule,
                         z: np.ndarray, k: int) -> float:
    a = float(schedule.alpha[k])
    s = float(schedule.sigma[k])
    diff = z[None, :] - a * measure.points
    logkern = -np.sum(diff * diff, axis=1) / (2.0 * s * s)
    t = logkern + np.log(measure.masses, where=measure.masses > 0,
                         out=np.full(len(measure.masses), -np.inf))
    tmax = np.max(t)
    kern = np.exp(t - tmax)
    den = kern.sum()
    num = float(kern @ measure.weights)
    if not (num > 0.0 and den > 0.0):
        raise OracleError(f"posterior weight expectation degenerate at k={k}")
    return float(np.log(num) - np.log(den))


def grid_intractable_score(measure: SupportMeasure, schedule: NoiseSchedule,
                           z_k: np.ndarray, k: int,
                           h: float | None = None) -> np.ndarray:
    """Guidance score d/dz_k log E[w | z_k] by central differences.

    Entirely independent of the autodiff path: quadrature plus finite
    differences. The step defaults to 1e-4 * sigma_k, which balances
    truncation against roundoff across all noise levels.
    """
    z = np.asarray(z_k, dtype=np.float64).copy()
    if z.ndim != 1:
        raise OracleError("grid score expects a single query point")
    if h is None:
        h = 1e-4 * float(schedule.sigma[k])
    score = np.zeros_like(z)
    for i in range(z.size):
        orig = z[i]
        z[i] = orig + h
        lp = _log_expected_weight(measure, schedule, z, k)
        z[i] = orig - h
        lm = _log_expected_weight(measure, schedule, z, k)
        z[i] = orig
        score[i] = (lp - lm) / (2.0 * h)
    return score


def auto_grid_measure(build: Callable[[int], SupportMeasure],
                      schedule: NoiseSchedule,
                      probes: Sequence[np.ndarray], k: int,
                      tol: float = 1e-6, start: int = 257,
                      max_points: int = 1025) -> SupportMeasure:
    """Refine a grid measure until E[w|z_k] stabilizes at the probes.

    ``build(n)`` constructs the measure on an n-by-n grid. Resolution
    doubles (n -> 2n-1, which nests Simpson panels) until successive
    expectations agree to ``tol``; raises GridResolutionError otherwise.
    """
    n = start
    measure = build(n)
    vals = np.array([expected_weight(measure, schedule, p, k) for p in probes])
    while n < max_points:
        n = 2 * n - 1
        finer = build(n)
        fvals = np.array([expected_weight(finer, schedule, p, k) for p in probes])
        drift = np.max(np.abs(fvals - vals) / np.maximum(np.abs(fvals), 1e-300))
        measure, vals = finer, fvals
        if drift < tol:
            return measure
    raise GridResolutionError(
        f"E[w|z_k] did not stabilize to {tol:g} by {max_points} grid points")


def importance_resample_target(samples: np.ndarray,
                               weight_fn: Callable | np.ndarray,
                               m: int, rng: SeededRng) -> np.ndarray:
    """Draw m points from the pool with probabilities proportional to weight."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    w = weight_fn(samples) if callable(weight_fn) else np.asarray(weight_fn, float)
    if w.shape != (len(samples),):
        raise OracleError("one weight per pool sample required")
    if np.any(w < 0.0):
        raise OracleError("negative weights cannot form resampling probabilities")
    total = w.sum()
    if total <= 0.0:
        raise OracleError("all-zero weights: resampling target undefined")
    cdf = np.cumsum(w / total)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, rng.uniform((m,)), side="right")
    return samples[idx]

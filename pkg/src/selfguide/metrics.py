"""Two-sample metrics for comparing sampler output against ground truth."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .rng import SeededRng

_BLOCK = 2048


def _mean_pairwise(X: np.ndarray, Y: np.ndarray) -> float:
    """Mean Euclidean distance over all (x, y) pairs, chunked."""
    total = 0.0
    for lo in range(0, len(X), _BLOCK):
        total += cdist(X[lo:lo + _BLOCK], Y).sum()
    return total / (len(X) * len(Y))


def energy_distance(X: np.ndarray, Y: np.ndarray) -> float:
    """Energy distance between empirical samples.

    V-statistic form 2 E|x-y| - E|x-x'| - E|y-y'| with diagonals included,
    which is exactly zero for identical samples and nonnegative always.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("energy distance needs non-empty sample sets")
    ed = (2.0 * _mean_pairwise(X, Y) - _mean_pairwise(X, X)
          - _mean_pairwise(Y, Y))
    return max(ed, 0.0)


def histogram_tv(X: np.ndarray, Y: np.ndarray, bounds=(-4.0, 4.0),
                 bins: int = 64) -> float:
    """Total variation between histograms on a fixed grid over ``bounds``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    d = X.shape[1]
    edges = [np.linspace(bounds[0], bounds[1], bins + 1)] * d
    hx, _ = np.histogramdd(X, bins=edges)
    hy, _ = np.histogramdd(Y, bins=edges)
    return 0.5 * float(np.abs(hx / len(X) - hy / len(Y)).sum())


def mode_frequencies(X: np.ndarray, modes: np.ndarray) -> np.ndarray:
    """Fraction of samples nearest to each mode; sums to one."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    modes = np.atleast_2d(np.asarray(modes, dtype=np.float64))
    nearest = np.argmin(cdist(X, modes), axis=1)
    counts = np.bincount(nearest, minlength=len(modes))
    return counts / len(X)


def energy_permutation_test(X: np.ndarray, Y: np.ndarray, rng: SeededRng,
                            n_perms: int = 200,
                            max_points: int = 2000) -> tuple[float, float]:
    """Permutation test of distribution equality via energy distance.

    Returns ``(statistic, p_value)``. Groups larger than ``max_points``
    are subsampled so the pooled distance matrix stays desk-sized; the
    p-value uses the add-one estimator, so it is never exactly zero.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if len(X) > max_points:
        X = X[rng.shuffle_index(len(X))[:max_points]]
    if len(Y) > max_points:
        Y = Y[rng.shuffle_index(len(Y))[:max_points]]
    n, m = len(X), len(Y)
    pool = np.vstack([X, Y])
    D = cdist(pool, pool)
    row_sums = D.sum(axis=1)
    total = float(row_sums.sum())

    def stat(mask_x: np.ndarray) -> float:
        u = mask_x.astype(np.float64)
        du = D @ u
        sxx = float(u @ du)
        sxy = float(du.sum() - sxx)  # = v.D.u by symmetry
        syy = total - 2.0 * sxy - sxx
        return max(2.0 * sxy / (n * m) - sxx / (n * n) - syy / (m * m), 0.0)

    base_mask = np.zeros(n + m, dtype=bool)
    base_mask[:n] = True
    observed = stat(base_mask)
    hits = 0
    for _ in range(n_perms):
        perm = rng.shuffle_index(n + m)
        mask = np.zeros(n + m, dtype=bool)
        mask[perm[:n]] = True
        if stat(mask) >= observed:
            hits += 1
    pvalue = (hits + 1.0) / (n_perms + 1.0)
    return observed, pvalue


@dataclass
class MetricsReport:
    """Bundle of two-sample diagnostics, serializable to JSON."""

    energy_distance: float
    histogram_tv: float
    mode_frequencies: list[float] | None = None
    permutation_pvalue: float | None = None

    def __post_init__(self):
        if self.energy_distance < 0.0:
            raise ValueError("energy distance must be nonnegative")
        if not (0.0 <= self.histogram_tv <= 1.0):
            raise ValueError("histogram TV must lie in [0, 1]")
        if self.mode_frequencies is not None:
            if abs(sum(self.mode_frequencies) - 1.0) > 1e-12:
                raise ValueError("mode frequencies must sum to one")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def compare_samples(samples: np.ndarray, reference: np.ndarray,
                    rng: SeededRng, modes: np.ndarray | None = None,
                    n_perms: int = 200) -> MetricsReport:
    """Full report: energy distance, TV, optional modes, permutation p."""
    ed = energy_distance(samples, reference)
    tv = histogram_tv(samples, reference)
    freqs = None
    if modes is not None:
        freqs = mode_frequencies(samples, modes).tolist()
    _, p = energy_permutation_test(samples, reference, rng, n_perms=n_perms)
    return MetricsReport(energy_distance=ed, histogram_tv=tv,
                         mode_frequencies=freqs, permutation_pvalue=p)

"""Synthetic 2-D datasets, energy-based weight functions and a one-step
contextual-bandit transition table.

All generators are deterministic given a SeededRng and emit points inside
[-4, 4]^2. Each distribution carries a canonical mode set (means, curve
discretizations or cell centers); the default energy of a point is its
squared distance to that set, which makes the weighted target a sharpened
version of the base distribution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .rng import SeededRng

TOY_KINDS = ("spiral", "eight_gaussians", "swiss_roll", "rings", "moons",
             "checkerboard")

_DEFAULT_NOISE = {
    "spiral": 0.10,
    "eight_gaussians": 0.15,
    "swiss_roll": 0.10,
    "rings": 0.08,
    "moons": 0.08,
    "checkerboard": 0.0,
}

_SPIRAL_TURNS = 3.0 * np.pi
_SPIRAL_RADIUS = 3.5
_RING_RADII = np.array([1.2, 2.2, 3.2])
_MOON_SCALE = 2.2
_MOON_CENTER = np.array([0.5, 0.25])
_EIGHT_RADIUS = 2.0


class ToyDataError(ValueError):
    pass


@dataclass(frozen=True)
class ToyDistribution:
    kind: str
    noise: float | None = None

    def __post_init__(self):
        if self.kind not in TOY_KINDS:
            raise ToyDataError(f"unknown toy distribution '{self.kind}'")

    @property
    def noise_scale(self) -> float:
        return _DEFAULT_NOISE[self.kind] if self.noise is None else self.noise


def spiral_curve(theta: np.ndarray) -> np.ndarray:
    r = _SPIRAL_RADIUS * theta / _SPIRAL_TURNS
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def swiss_roll_curve(t: np.ndarray) -> np.ndarray:
    phi = 1.5 * np.pi * (1.0 + 2.0 * t)
    pts = np.column_stack([phi * np.cos(phi), phi * np.sin(phi)])
    return pts * (3.4 / (4.5 * np.pi))


def moon_curves(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    upper = np.column_stack([np.cos(theta), np.sin(theta)])
    lower = np.column_stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)])
    return (_MOON_SCALE * (upper - _MOON_CENTER),
            _MOON_SCALE * (lower - _MOON_CENTER))


def eight_gaussian_means() -> np.ndarray:
    angles = np.arange(8) * (2.0 * np.pi / 8.0)
    return _EIGHT_RADIUS * np.column_stack([np.cos(angles), np.sin(angles)])


def checkerboard_centers() -> np.ndarray:
    centers = []
    for i in range(4):
        for j in range(4):
            if (i + j) % 2 == 0:
                centers.append([-3.0 + 2.0 * i, -3.0 + 2.0 * j])
    return np.array(centers)


def sample_toy(dist: ToyDistribution, n: int, rng: SeededRng) -> np.ndarray:
    """n i.i.d. draws from the named distribution, shape (n, 2)."""
    if n < 1:
        raise ToyDataError("n must be >= 1")
    noise = dist.noise_scale
    kind = dist.kind
    if kind == "spiral":
        theta = _SPIRAL_TURNS * np.sqrt(rng.uniform((n,)))
        pts = spiral_curve(theta)
    elif kind == "eight_gaussians":
        means = eight_gaussian_means()
        pts = means[rng.integers(0, 8, (n,))]
    elif kind == "swiss_roll":
        pts = swiss_roll_curve(rng.uniform((n,)))
    elif kind == "rings":
        radii = _RING_RADII[rng.integers(0, len(_RING_RADII), (n,))]
        ang = 2.0 * np.pi * rng.uniform((n,))
        radii = radii + noise * rng.gaussian((n,))
        return np.column_stack([radii * np.cos(ang), radii * np.sin(ang)])
    elif kind == "moons":
        theta = np.pi * rng.uniform((n,))
        branch = rng.integers(0, 2, (n,))
        upper, lower = moon_curves(theta)
        pts = np.where(branch[:, None] == 0, upper, lower)
        return pts + _MOON_SCALE * noise * rng.gaussian((n, 2))
    elif kind == "checkerboard":
        centers = checkerboard_centers()
        cell = centers[rng.integers(0, len(centers), (n,))]
        return cell + 2.0 * (rng.uniform((n, 2)) - 0.5)
    else:  # pragma: no cover - guarded by the dataclass
        raise ToyDataError(kind)
    return pts + noise * rng.gaussian((n, 2))


def toy_mode_set(dist: ToyDistribution, resolution: int = 2048) -> np.ndarray:
    """Canonical mode locations: means, cell centers or curve points."""
    kind = dist.kind
    if kind == "eight_gaussians":
        return eight_gaussian_means()
    if kind == "checkerboard":
        return checkerboard_centers()
    if kind == "spiral":
        return spiral_curve(np.linspace(0.0, _SPIRAL_TURNS, resolution))
    if kind == "swiss_roll":
        return swiss_roll_curve(np.linspace(0.0, 1.0, resolution))
    if kind == "rings":
        ang = np.linspace(0.0, 2.0 * np.pi, resolution, endpoint=False)
        circles = [np.column_stack([r * np.cos(ang), r * np.sin(ang)])
                   for r in _RING_RADII]
        return np.vstack(circles)
    if kind == "moons":
        theta = np.linspace(0.0, np.pi, resolution)
        upper, lower = moon_curves(theta)
        return np.vstack([upper, lower])
    raise ToyDataError(kind)


ENERGY_LENGTH_SCALE = 0.3


def mode_distance_energy(dist: ToyDistribution, resolution: int = 2048,
                         scale: float = ENERGY_LENGTH_SCALE) -> Callable[[np.ndarray], np.ndarray]:
    """Energy = squared distance to the distribution's own mode set.

    Distances are measured in units of ``scale`` so that moderate inverse
    temperatures already concentrate the weighted target visibly around
    the modes.
    """
    tree = cKDTree(toy_mode_set(dist, resolution))
    inv2 = 1.0 / (scale * scale)

    def xi(a: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(a, dtype=np.float64))
        d, _ = tree.query(pts)
        out = d * d * inv2
        return out if np.ndim(a) == 2 else float(out[0])

    return xi


def anchored_energy(anchor=(0.0, 0.0),
                    scale: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """Energy = squared distance to a fixed anchor point, in units of scale.

    Weighting by exp(-beta * xi) then reshapes the target macroscopically:
    mass far from the anchor dies off first, so raising beta visibly
    collapses the target onto the nearby part of the support.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    inv2 = 1.0 / (scale * scale)

    def xi(a: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(a, dtype=np.float64))
        out = np.sum((pts - anchor) ** 2, axis=1) * inv2
        return out if np.ndim(a) == 2 else float(out[0])

    return xi


@dataclass(frozen=True)
class EnergySpec:
    """Weight definition w(a) = exp(-beta * xi(a)) for an energy xi >= 0."""

    xi: Callable[[np.ndarray], np.ndarray]
    beta: float

    def __post_init__(self):
        if self.beta < 0.0:
            raise ToyDataError("inverse temperature beta must be >= 0")


def weight_from_energy(a: np.ndarray, spec: EnergySpec) -> np.ndarray:
    """Always-positive weights exp(-beta * xi(a))."""
    e = spec.xi(a)
    return np.exp(-spec.beta * np.asarray(e, dtype=np.float64)) \
        if np.ndim(e) else float(np.exp(-spec.beta * e))


@dataclass(frozen=True)
class BanditDatasetConfig:
    n: int
    noise: float = 0.3
    seed: int = 0


@dataclass
class Transitions:
    """Offline one-step transitions (s, a, r, s', done)."""

    s: np.ndarray      # (n, 2)
    a: np.ndarray      # (n, 2)
    r: np.ndarray      # (n,)
    s_next: np.ndarray  # (n, 2)
    done: np.ndarray   # (n,) bool

    def __len__(self) -> int:
        return len(self.r)


def make_bandit_dataset(cfg: BanditDatasetConfig) -> Transitions:
    """Single-step bandit: s ~ U[-1,1]^2, a = s + noise, r = -|a - s|^2."""
    if cfg.n < 1:
        raise ToyDataError("n must be >= 1")
    rng = SeededRng(cfg.seed, stream=91)
    s = 2.0 * rng.uniform((cfg.n, 2)) - 1.0
    a = s + cfg.noise * rng.gaussian((cfg.n, 2))
    r = -np.sum((a - s) ** 2, axis=1)
    return Transitions(s=s, a=a, r=r, s_next=s.copy(),
                       done=np.ones(cfg.n, dtype=bool))


# ---------------------------------------------------------------- file I/O

def write_actions_csv(path, actions: np.ndarray,
                      weights: np.ndarray | None = None,
                      betas: np.ndarray | None = None) -> None:
    actions = np.atleast_2d(actions)
    header = [f"a_{i + 1}" for i in range(actions.shape[1])]
    cols = [actions]
    if weights is not None:
        header.append("weight")
        cols.append(np.asarray(weights, float).reshape(-1, 1))
    if betas is not None:
        header.append("beta")
        cols.append(np.asarray(betas, float).reshape(-1, 1))
    table = np.column_stack(cols)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, table, delimiter=",", fmt="%.17g")


def read_actions_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
        table = np.loadtxt(fh, delimiter=",", ndmin=2)
    out: dict[str, np.ndarray] = {}
    acols = [i for i, h in enumerate(header) if h.startswith("a_")]
    out["actions"] = table[:, acols]
    if "weight" in header:
        out["weights"] = table[:, header.index("weight")]
    if "beta" in header:
        out["betas"] = table[:, header.index("beta")]
    return out


TRANSITION_HEADER = ["s_1", "s_2", "a_1", "a_2", "r", "s'_1", "s'_2", "done"]


def write_transitions_csv(path, tr: Transitions) -> None:
    table = np.column_stack([tr.s, tr.a, tr.r.reshape(-1, 1), tr.s_next,
                             tr.done.astype(float).reshape(-1, 1)])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRANSITION_HEADER) + "\n")
        np.savetxt(fh, table, delimiter=",", fmt="%.17g")


def read_transitions_csv(path) -> Transitions:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TRANSITION_HEADER:
            raise ToyDataError(f"unexpected transition header {header}")
        table = np.loadtxt(fh, delimiter=",", ndmin=2)
    return Transitions(s=table[:, 0:2], a=table[:, 2:4], r=table[:, 4],
                       s_next=table[:, 5:7], done=table[:, 7] > 0.5)

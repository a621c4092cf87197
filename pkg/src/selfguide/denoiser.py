"""Conditioned noise-prediction networks and their training loop.

Data points are diffused jointly with their scalar weights: a sample
``a`` with weight ``w`` becomes the augmented vector ``z = [a, w]`` and a
single network learns to predict the corruption noise for the whole
vector. Conditioning is optional: none, a scalar inverse temperature for
energy-derived weights, or a state vector for offline-RL style datasets.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .optim import AdamState, adam_step, init_adam
from .rng import SeededRng
from .schedules import NoiseSchedule, build_schedule

EMBED_FREQ_LO = 1.0
EMBED_FREQ_HI = 40.0


class DenoiserError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Raised when the loss turns non-finite; names the step and batch."""


# ------------------------------------------------------------- embeddings

def sinusoid_embed(x, dim: int = 64) -> np.ndarray:
    """Sinusoidal features of x in [0, 1] with geometric frequencies.

    Layout is [sin block | cos block], so x = 0 maps to all-zero sines and
    all-one cosines.
    """
    if dim % 2 != 0:
        raise DenoiserError("embedding dimension must be even")
    x = np.asarray(x, dtype=np.float64)
    freqs = np.geomspace(EMBED_FREQ_LO, EMBED_FREQ_HI, dim // 2)
    phase = x[..., None] * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def time_embed(k, K: int, dim: int = 64) -> np.ndarray:
    """Embedding of a diffusion step; accepts a scalar k or an array."""
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k > K):
        raise DenoiserError(f"step {k} outside [0, {K}]")
    return sinusoid_embed(k / K, dim)


# ---------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentedSample:
    """One data point joined with its positive scalar weight."""

    a: np.ndarray
    w: float


class AugmentedDataset(Sequence):
    """Augmented samples stored as one (N, d+1) array.

    ``rescale`` records the single global constant applied to the raw
    weights; scaling every weight by a positive constant leaves the
    guided target unchanged, so it is metadata rather than signal.
    """

    def __init__(self, z: np.ndarray, rescale: float = 1.0):
        self.z = np.asarray(z, dtype=np.float64)
        self.rescale = float(rescale)

    def __len__(self) -> int:
        return len(self.z)

    def __getitem__(self, i) -> AugmentedSample:
        row = self.z[i]
        return AugmentedSample(a=row[:-1].copy(), w=float(row[-1]))

    @property
    def actions(self) -> np.ndarray:
        return self.z[:, :-1]

    @property
    def weights(self) -> np.ndarray:
        return self.z[:, -1]


def augment_dataset(actions: np.ndarray, weight_fn: Callable | np.ndarray,
                    rescale: float = 1.0) -> AugmentedDataset:
    """Join every action with its weight: z = [a, rescale * w(a)]."""
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    w = weight_fn(actions) if callable(weight_fn) else np.asarray(weight_fn)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != len(actions):
        raise DenoiserError("one weight per action required")
    if rescale <= 0.0:
        raise DenoiserError("global weight rescale must be positive")
    bad = np.flatnonzero(~(w > 0.0))
    if bad.size:
        shown = ", ".join(map(str, bad[:10]))
        more = "" if bad.size <= 10 else f" (+{bad.size - 10} more)"
        raise DenoiserError(
            f"non-positive weights at dataset indices [{shown}]{more}")
    z = np.column_stack([actions, rescale * w])
    return AugmentedDataset(z, rescale=rescale)


# -------------------------------------------------------- normalization

@dataclass
class Normalization:
    """Channel statistics mapping raw augmented samples to training space.

    Actions are standardized per coordinate; the weight channel is divided
    by a positive scale (the dataset mean, or a per-beta mean curve for
    temperature-conditioned training). Rescaling weights by any positive
    constant is provably invisible to exact guidance, so the scale choice
    only conditions the diffusion, never the target.
    """

    action_mean: np.ndarray
    action_std: np.ndarray
    weight_scale: float = 1.0
    beta_grid: np.ndarray | None = None
    beta_log_scales: np.ndarray | None = None
    # per-channel range of the normalized training data; clean-data
    # estimates are clipped here during sampling (the exact posterior mean
    # always lies inside the data's convex hull, so the clip is bias-free
    # for a perfect model and a stabilizer for an imperfect one)
    channel_lo: np.ndarray | None = None
    channel_hi: np.ndarray | None = None

    @classmethod
    def identity(cls, d: int) -> "Normalization":
        return cls(action_mean=np.zeros(d), action_std=np.ones(d))

    @classmethod
    def fit(cls, z: np.ndarray) -> "Normalization":
        actions, w = z[:, :-1], z[:, -1]
        std = actions.std(axis=0)
        std[std < 1e-12] = 1.0
        norm = cls(action_mean=actions.mean(axis=0), action_std=std,
                   weight_scale=float(w.mean()))
        z_norm = norm.normalize(z)
        norm.channel_lo = z_norm.min(axis=0)
        norm.channel_hi = z_norm.max(axis=0)
        return norm

    def weight_scale_at(self, beta=None):
        if self.beta_grid is None:
            return self.weight_scale
        if beta is None:
            raise DenoiserError("this normalization is beta-dependent; "
                                "a beta value is required")
        logs = np.interp(np.asarray(beta, dtype=np.float64),
                         self.beta_grid, self.beta_log_scales)
        return np.exp(logs)

    def normalize(self, z: np.ndarray, beta=None) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        out = np.empty_like(z)
        out[:, :-1] = (z[:, :-1] - self.action_mean) / self.action_std
        out[:, -1] = z[:, -1] / self.weight_scale_at(beta)
        return out

    def denormalize(self, z: np.ndarray, beta=None) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        out = np.empty_like(z)
        out[:, :-1] = z[:, :-1] * self.action_std + self.action_mean
        out[:, -1] = z[:, -1] * self.weight_scale_at(beta)
        return out

    def to_dict(self) -> dict:
        out = {"action_mean": self.action_mean.tolist(),
               "action_std": self.action_std.tolist(),
               "weight_scale": self.weight_scale}
        if self.beta_grid is not None:
            out["beta_grid"] = self.beta_grid.tolist()
            out["beta_log_scales"] = self.beta_log_scales.tolist()
        if self.channel_lo is not None:
            out["channel_lo"] = self.channel_lo.tolist()
            out["channel_hi"] = self.channel_hi.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(
            action_mean=np.asarray(d["action_mean"], dtype=np.float64),
            action_std=np.asarray(d["action_std"], dtype=np.float64),
            weight_scale=float(d["weight_scale"]),
            beta_grid=(np.asarray(d["beta_grid"]) if "beta_grid" in d else None),
            beta_log_scales=(np.asarray(d["beta_log_scales"])
                             if "beta_log_scales" in d else None),
            channel_lo=(np.asarray(d["channel_lo"])
                        if "channel_lo" in d else None),
            channel_hi=(np.asarray(d["channel_hi"])
                        if "channel_hi" in d else None),
        )


# ------------------------------------------------------------- networks

def _he_init(rng: SeededRng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.gaussian((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def _dropout(h, p: float, rng: SeededRng | None):
    if p <= 0.0:
        return h
    if rng is None:
        raise DenoiserError("dropout requires an rng in training mode")
    mask = (rng.uniform(ad.value_of(h).shape) >= p) / (1.0 - p)
    return ad.mul(h, mask)


@dataclass(frozen=True)
class MlpConfig:
    dim: int                     # width of z = d + 1
    K: int
    depth: int = 4
    width: int = 128
    time_dim: int = 64
    conditioning: str = "none"   # none | beta | state
    state_dim: int = 0
    beta_max: float = 20.0

    arch = "mlp"


@dataclass(frozen=True)
class ResidualConfig:
    dim: int
    K: int
    blocks: int = 3
    width: int = 256
    head_width: int = 256
    time_dim: int = 64
    conditioning: str = "state"
    state_dim: int = 0
    beta_max: float = 20.0

    arch = "residual"


class _DenoiserBase:
    """Shared conditioning/embedding plumbing for the two architectures."""

    def __init__(self, config, rng: SeededRng | None = None,
                 params: dict[str, np.ndarray] | None = None):
        if config.conditioning not in ("none", "beta", "state"):
            raise DenoiserError(f"unknown conditioning '{config.conditioning}'")
        if config.conditioning == "state" and config.state_dim < 1:
            raise DenoiserError("state conditioning requires state_dim >= 1")
        self.config = config
        self._time_table = time_embed(np.arange(config.K + 1), config.K,
                                      config.time_dim)
        if params is not None:
            self.params = params
        else:
            self.params = self._init_params(rng or SeededRng(0, stream=1))

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def conditioning(self) -> str:
        return self.config.conditioning

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _embed(self, batch: int, k, c):
        cfg = self.config
        k = np.asarray(k)
        temb = self._time_table[int(k)] if k.ndim == 0 else self._time_table[k]
        if temb.ndim == 1:
            temb = np.broadcast_to(temb, (batch, cfg.time_dim))
        feats = [temb]
        if cfg.conditioning == "beta":
            if c is None:
                raise DenoiserError("beta-conditioned model called without beta")
            beta = np.asarray(c, dtype=np.float64)
            bemb = sinusoid_embed(beta / cfg.beta_max, cfg.time_dim)
            if bemb.ndim == 1:
                bemb = np.broadcast_to(bemb, (batch, cfg.time_dim))
            feats = [temb + bemb]
        elif cfg.conditioning == "state":
            if c is None:
                raise DenoiserError("state-conditioned model called without state")
            state = np.atleast_2d(np.asarray(c, dtype=np.float64))
            if state.shape[-1] != cfg.state_dim:
                raise DenoiserError(
                    f"state width {state.shape[-1]} != {cfg.state_dim}")
            if state.shape[0] == 1 and batch > 1:
                state = np.broadcast_to(state, (batch, cfg.state_dim))
            feats.append(state)
        elif c is not None:
            raise DenoiserError("unconditioned model called with conditioning")
        return feats

    def predict_eps(self, z_k, k, c=None, params=None, train_mode: bool = False,
                    dropout: float = 0.0, rng: SeededRng | None = None):
        """Noise prediction for z_k; records a graph when z_k is a Var."""
        squeeze = False
        if not isinstance(z_k, ad.Var) and np.ndim(z_k) == 1:
            z_k = np.asarray(z_k, dtype=np.float64)[None, :]
            squeeze = True
        batch = ad.value_of(z_k).shape[0]
        if ad.value_of(z_k).shape[-1] != self.config.dim:
            raise DenoiserError(
                f"input width {ad.value_of(z_k).shape[-1]} != {self.config.dim}")
        feats = self._embed(batch, k, c)
        out = self._forward(z_k, feats, params or self.params,
                            train_mode=train_mode, dropout=dropout, rng=rng)
        if squeeze:
            out = ad.value_of(out)[0] if not isinstance(out, ad.Var) else out
        return out

    def _init_params(self, rng):  # pragma: no cover - overridden
        raise NotImplementedError

    def _forward(self, z, feats, params, train_mode, dropout, rng):  # pragma: no cover
        raise NotImplementedError


class MlpDenoiser(_DenoiserBase):
    """Plain feed-forward noise predictor with gelu activations.

    Hidden layers use He initialization; the output layer starts at zero
    so a fresh model predicts the zero vector.
    """

    def _init_params(self, rng):
        cfg = self.config
        in_dim = cfg.dim + cfg.time_dim
        if cfg.conditioning == "state":
            in_dim += cfg.state_dim
        params = {}
        prev = in_dim
        for i in range(cfg.depth):
            params[f"layer{i}.weight"] = _he_init(rng, prev, cfg.width)
            params[f"layer{i}.bias"] = np.zeros(cfg.width)
            prev = cfg.width
        params["out.weight"] = np.zeros((prev, cfg.dim))
        params["out.bias"] = np.zeros(cfg.dim)
        return params

    def _forward(self, z, feats, params, train_mode, dropout, rng):
        h = ad.concat([z] + feats, axis=-1)
        for i in range(self.config.depth):
            h = ad.gelu(ad.add(ad.matmul(h, params[f"layer{i}.weight"]),
                               params[f"layer{i}.bias"]))
            if train_mode and dropout > 0.0:
                h = _dropout(h, dropout, rng)
        return ad.add(ad.matmul(h, params["out.weight"]), params["out.bias"])


class ResidualDenoiser(_DenoiserBase):
    """Residual noise predictor with a dedicated weight-channel head.

    The action channels read the final residual features; the weight
    channel reads mid-network features through a one-hidden-layer head,
    which keeps weight-only gradients shallow.
    """

    def _init_params(self, rng):
        cfg = self.config
        in_dim = cfg.dim + cfg.time_dim
        if cfg.conditioning == "state":
            in_dim += cfg.state_dim
        params = {
            "in.weight": _he_init(rng, in_dim, cfg.width),
            "in.bias": np.zeros(cfg.width),
        }
        for b in range(cfg.blocks):
            params[f"block{b}.ln_gain"] = np.ones(cfg.width)
            params[f"block{b}.ln_bias"] = np.zeros(cfg.width)
            params[f"block{b}.fc1.weight"] = _he_init(rng, cfg.width, cfg.width)
            params[f"block{b}.fc1.bias"] = np.zeros(cfg.width)
            params[f"block{b}.fc2.weight"] = _he_init(rng, cfg.width, cfg.width)
            params[f"block{b}.fc2.bias"] = np.zeros(cfg.width)
        params["action.weight"] = np.zeros((cfg.width, cfg.dim - 1))
        params["action.bias"] = np.zeros(cfg.dim - 1)
        params["whead.fc.weight"] = _he_init(rng, cfg.width, cfg.head_width)
        params["whead.fc.bias"] = np.zeros(cfg.head_width)
        params["whead.out.weight"] = np.zeros((cfg.head_width, 1))
        params["whead.out.bias"] = np.zeros(1)
        return params

    def _forward(self, z, feats, params, train_mode, dropout, rng):
        cfg = self.config
        h = ad.gelu(ad.add(ad.matmul(ad.concat([z] + feats, axis=-1),
                                     params["in.weight"]), params["in.bias"]))
        mid = h
        mid_index = (cfg.blocks - 1) // 2
        for b in range(cfg.blocks):
            u = ad.layer_norm(h, params[f"block{b}.ln_gain"],
                              params[f"block{b}.ln_bias"])
            u = ad.gelu(ad.add(ad.matmul(u, params[f"block{b}.fc1.weight"]),
                               params[f"block{b}.fc1.bias"]))
            if train_mode and dropout > 0.0:
                u = _dropout(u, dropout, rng)
            u = ad.add(ad.matmul(u, params[f"block{b}.fc2.weight"]),
                       params[f"block{b}.fc2.bias"])
            h = ad.add(h, u)
            if b == mid_index:
                mid = h
        eps_a = ad.add(ad.matmul(h, params["action.weight"]),
                       params["action.bias"])
        wfeat = ad.gelu(ad.add(ad.matmul(mid, params["whead.fc.weight"]),
                               params["whead.fc.bias"]))
        eps_w = ad.add(ad.matmul(wfeat, params["whead.out.weight"]),
                       params["whead.out.bias"])
        return ad.concat([eps_a, eps_w], axis=-1)


def build_denoiser(config, rng: SeededRng | None = None,
                   params: dict | None = None):
    if config.arch == "mlp":
        return MlpDenoiser(config, rng=rng, params=params)
    if config.arch == "residual":
        return ResidualDenoiser(config, rng=rng, params=params)
    raise DenoiserError(f"unknown architecture '{config.arch}'")


# ------------------------------------------------------- training data

class FixedTrainData:
    """Pre-normalized augmented rows with optional per-row conditioning."""

    def __init__(self, z_norm: np.ndarray, normalization: Normalization,
                 cond: np.ndarray | None = None, cond_mode: str = "none"):
        self.z = z_norm
        self.normalization = normalization
        self.cond = cond
        self.cond_mode = cond_mode

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def __len__(self) -> int:
        return len(self.z)

    def sample_batch(self, rng: SeededRng, batch: int):
        idx = rng.integers(0, len(self.z), (batch,))
        cond = None if self.cond is None else self.cond[idx]
        return self.z[idx], cond


def prepare_fixed(dataset: AugmentedDataset | np.ndarray,
                  states: np.ndarray | None = None) -> FixedTrainData:
    """Standardize an augmented dataset for training.

    Action channels go to zero mean / unit variance; the weight channel is
    divided by its dataset mean.
    """
    z = dataset.z if isinstance(dataset, AugmentedDataset) else np.asarray(dataset)
    norm = Normalization.fit(z)
    z_norm = norm.normalize(z)
    if states is not None:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if len(states) != len(z_norm):
            raise DenoiserError("one state per sample required")
        return FixedTrainData(z_norm, norm, cond=states, cond_mode="state")
    return FixedTrainData(z_norm, norm, cond_mode="none")


class EnergyTrainData:
    """Temperature-conditioned training data for energy-derived weights.

    Each batch draws a fresh beta per sample from ``beta_range`` and
    recomputes weights w = exp(-beta * xi(a)) / c(beta), where c(beta) is
    the dataset-mean weight at that beta (a smooth positive rescale that
    exact guidance cannot see). The c(beta) curve is tabulated once and
    interpolated in log space.
    """

    cond_mode = "beta"

    def __init__(self, actions: np.ndarray, xi: Callable,
                 beta_range: tuple[float, float] = (0.0, 20.0),
                 scale_grid: int = 257):
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        self.xi_values = np.asarray(xi(actions), dtype=np.float64).reshape(-1)
        if np.any(self.xi_values < 0.0) or not np.all(np.isfinite(self.xi_values)):
            raise DenoiserError("energies must be finite and nonnegative")
        self.beta_range = (float(beta_range[0]), float(beta_range[1]))
        grid = np.linspace(self.beta_range[0], self.beta_range[1], scale_grid)
        # log mean weight at each beta, computed stably from the energies
        log_scales = np.empty(scale_grid)
        for i, b in enumerate(grid):
            t = -b * self.xi_values
            tmax = t.max()
            log_scales[i] = tmax + np.log(np.mean(np.exp(t - tmax)))
        mean = actions.mean(axis=0)
        std = actions.std(axis=0)
        std[std < 1e-12] = 1.0
        self.actions_norm = (actions - mean) / std
        # the largest normalized weight over the whole beta range occurs at
        # the minimum energy, so the channel bound is a 1-D grid maximum
        w_hi = float(np.max(np.exp(-grid * self.xi_values.min() - log_scales)))
        self.normalization = Normalization(
            action_mean=mean, action_std=std, weight_scale=1.0,
            beta_grid=grid, beta_log_scales=log_scales,
            channel_lo=np.append(self.actions_norm.min(axis=0), 0.0),
            channel_hi=np.append(self.actions_norm.max(axis=0), w_hi))

    @property
    def dim(self) -> int:
        return self.actions_norm.shape[1] + 1

    def __len__(self) -> int:
        return len(self.actions_norm)

    def sample_batch(self, rng: SeededRng, batch: int):
        idx = rng.integers(0, len(self.actions_norm), (batch,))
        lo, hi = self.beta_range
        beta = lo + (hi - lo) * rng.uniform((batch,))
        logw = -beta * self.xi_values[idx] \
            - np.interp(beta, self.normalization.beta_grid,
                        self.normalization.beta_log_scales)
        z0 = np.column_stack([self.actions_norm[idx], np.exp(logw)])
        return z0, beta


# ------------------------------------------------------------- training

@dataclass
class TrainConfig:
    K: int = 100
    schedule: str = "cosine"
    batch: int = 256
    lr: float = 1e-4
    steps: int = 20_000
    dropout: float = 0.0
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.K < 1 or self.batch < 1 or self.steps < 1:
            raise DenoiserError("K, batch and steps must all be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise DenoiserError("dropout must lie in [0, 1)")


def _batch_hash(z0: np.ndarray, ks: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(z0.tobytes())
    h.update(np.ascontiguousarray(ks).tobytes())
    return h.hexdigest()[:16]


def train(data, cfg: TrainConfig, model=None,
          adam: AdamState | None = None):
    """Minimize the noise-prediction loss over the augmented dataset.

    ``data`` is a FixedTrainData / EnergyTrainData (an AugmentedDataset is
    normalized on the fly). Returns the trained model and a loss trace of
    (step, batch loss) pairs recorded every ``cfg.log_every`` steps; the
    loss is the mean squared noise-residual norm, so a zero-output model
    starts near d + 1 on standardized data.
    """
    if isinstance(data, (AugmentedDataset, np.ndarray)):
        data = prepare_fixed(data)
    if len(data) < 1:
        raise DenoiserError("training data must be non-empty")
    sched = build_schedule(cfg.schedule, cfg.K)
    root = SeededRng(cfg.seed)
    rng_batch, rng_k = root.split(11), root.split(12)
    rng_noise, rng_drop = root.split(13), root.split(14)
    if model is None:
        mcfg = MlpConfig(dim=data.dim, K=cfg.K, conditioning=data.cond_mode)
        model = MlpDenoiser(mcfg, rng=root.split(10))
    if model.config.K != cfg.K:
        raise DenoiserError("model K disagrees with training K")
    if adam is None:
        adam = init_adam(model.params, lr=cfg.lr)

    trace: list[tuple[int, float]] = []
    batch = cfg.batch
    for step in range(cfg.steps):
        z0, cond = data.sample_batch(rng_batch, batch)
        ks = rng_k.integers(1, cfg.K + 1, (batch,))
        eps = rng_noise.gaussian(z0.shape)
        zk = sched.forward_noise_batch(z0, ks, eps)
        lifted = {n: ad.leaf(p, name=n) for n, p in model.params.items()}
        pred = model.predict_eps(zk, ks, cond, params=lifted,
                                 train_mode=True, dropout=cfg.dropout,
                                 rng=rng_drop)
        resid = ad.sub(eps, pred)
        loss = ad.mul(ad.reduce_sum(ad.mul(resid, resid)), 1.0 / batch)
        loss_val = float(ad.value_of(loss))
        if not np.isfinite(loss_val):
            raise TrainingError(
                f"non-finite loss at step {step}, batch {_batch_hash(z0, ks)}")
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            trace.append((step, loss_val))
        grads = ad.vjp(loss)
        adam_step(model.params,
                  {n: ad.grad_of(grads, v) for n, v in lifted.items()}, adam)
    return model, trace


# ----------------------------------------------------------- checkpoints

_CONFIG_TYPES = {"mlp": MlpConfig, "residual": ResidualConfig}
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, normalization: Normalization,
                    meta: dict | None = None,
                    adam: AdamState | None = None) -> None:
    """Write a versioned JSON container with config echo and parameters."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.config.arch,
        "config": asdict(model.config),
        "normalization": normalization.to_dict(),
        "meta": meta or {},
        "params": {n: {"shape": list(p.shape), "data": p.ravel().tolist()}
                   for n, p in model.params.items()},
    }
    if adam is not None:
        payload["optimizer"] = {
            "t": adam.t, "lr": adam.lr, "beta1": adam.beta1,
            "beta2": adam.beta2, "eps": adam.eps,
            "m": {n: v.ravel().tolist() for n, v in adam.m.items()},
            "v": {n: v.ravel().tolist() for n, v in adam.v.items()},
        }
    with open(path, "w") as fh:
        json.dump(payload, fh)


@dataclass
class Checkpoint:
    model: object
    normalization: Normalization
    meta: dict
    adam: AdamState | None = None


def load_checkpoint(path) -> Checkpoint:
    """Load a checkpoint, rejecting geometry that disagrees with its config."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DenoiserError(
            f"unsupported checkpoint version {payload.get('format_version')}")
    cfg_cls = _CONFIG_TYPES.get(payload["arch"])
    if cfg_cls is None:
        raise DenoiserError(f"unknown architecture '{payload['arch']}'")
    config = cfg_cls(**payload["config"])
    reference = build_denoiser(config, rng=SeededRng(0))
    params = {}
    for name, ref in reference.params.items():
        entry = payload["params"].get(name)
        if entry is None:
            raise DenoiserError(f"checkpoint missing parameter '{name}'")
        shape = tuple(entry["shape"])
        if shape != ref.shape:
            raise DenoiserError(
                f"checkpoint parameter '{name}' has shape {shape}, "
                f"config implies {ref.shape}")
        params[name] = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
    extra = set(payload["params"]) - set(reference.params)
    if extra:
        raise DenoiserError(f"checkpoint has unexpected parameters {sorted(extra)}")
    model = build_denoiser(config, params=params)
    norm = Normalization.from_dict(payload["normalization"])
    adam = None
    if "optimizer" in payload:
        opt = payload["optimizer"]
        adam = AdamState(
            lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"],
            eps=opt["eps"], t=opt["t"],
            m={n: np.asarray(v).reshape(params[n].shape)
               for n, v in opt["m"].items()},
            v={n: np.asarray(v).reshape(params[n].shape)
               for n, v in opt["v"].items()},
        )
    return Checkpoint(model=model, normalization=norm,
                      meta=payload.get("meta", {}), adam=adam)

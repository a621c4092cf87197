"""Expectile-regression critics and the weight formulations they feed.

The value network V regresses the tau-expectile of the (double,
soft-updated) Q targets over dataset actions only, and Q regresses the
one-step bootstrap r + gamma (1 - done) V(s'). Learned values then turn
into strictly positive per-action weights through one of three
formulations: a sigmoid-smoothed expectile weight, a clipped exponential
of the advantage, or the linex-derived ratio weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .optim import AdamState, adam_step, init_adam
from .rng import SeededRng
from .toyworld import Transitions

_EXP_FLOOR = 1e-300  # keeps clipped exponentials strictly positive


class CriticError(ValueError):
    pass


# ------------------------------------------------------------ expectiles

def expectile_loss(u, tau: float):
    """Asymmetric squared loss |tau - 1{u < 0}| * u^2."""
    u = np.asarray(u, dtype=np.float64)
    weight = np.where(u < 0.0, 1.0 - tau, tau)
    return weight * u * u


def mc_expectile(xs: np.ndarray, tau: float) -> float:
    """The tau-expectile of a sample, solved by bisection.

    The expectile is the root of f(v) = tau * sum_{x>=v}(x-v)
    - (1-tau) * sum_{x<v}(v-x), which is continuous and strictly
    decreasing.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise CriticError("expectile of an empty sample")

    def f(v):
        u = xs - v
        return float(np.sum(np.where(u >= 0.0, tau, 1.0 - tau) * u))

    lo, hi = float(xs.min()), float(xs.max())
    if lo == hi:
        return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# -------------------------------------------------------------- networks

def _relu_mlp_params(rng: SeededRng, in_dim: int, hidden: int) -> dict:
    def he(fan_in, fan_out):
        return rng.gaussian((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)

    return {
        "fc1.weight": he(in_dim, hidden), "fc1.bias": np.zeros(hidden),
        "fc2.weight": he(hidden, hidden), "fc2.bias": np.zeros(hidden),
        "out.weight": he(hidden, 1) * 0.1, "out.bias": np.zeros(1),
    }


def _relu_mlp_forward(params, x):
    h = ad.relu(ad.add(ad.matmul(x, params["fc1.weight"]), params["fc1.bias"]))
    h = ad.relu(ad.add(ad.matmul(h, params["fc2.weight"]), params["fc2.bias"]))
    out = ad.add(ad.matmul(h, params["out.weight"]), params["out.bias"])
    return out


def _eval_scalar_net(params, x) -> np.ndarray:
    return ad.value_of(_relu_mlp_forward(params, np.atleast_2d(x)))[:, 0]


def soft_update(target: dict, online: dict, lam: float) -> None:
    """theta_hat <- (1 - lam) theta_hat + lam theta, in place."""
    for name, p in online.items():
        t = target[name]
        t *= (1.0 - lam)
        t += lam * p


@dataclass
class CriticConfig:
    gamma: float = 0.99
    tau: float = 0.7
    lam: float = 0.005
    lr: float = 3e-4
    batch: int = 256
    steps: int = 15_000
    hidden: int = 256
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise CriticError("expectile tau must lie in (0, 1)")
        if not (0.0 < self.lam <= 1.0):
            raise CriticError("soft-update rate must lie in (0, 1]")


@dataclass
class CriticState:
    """Double Q-networks with soft-updated targets plus a value network."""

    q1: dict
    q2: dict
    q1_target: dict
    q2_target: dict
    v: dict
    config: CriticConfig
    adam_q1: AdamState = field(repr=False, default=None)
    adam_q2: AdamState = field(repr=False, default=None)
    adam_v: AdamState = field(repr=False, default=None)

    def q_value(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Conservative action value min(Q1, Q2)."""
        x = np.column_stack([np.atleast_2d(s), np.atleast_2d(a)])
        return np.minimum(_eval_scalar_net(self.q1, x),
                          _eval_scalar_net(self.q2, x))

    def value(self, s: np.ndarray) -> np.ndarray:
        return _eval_scalar_net(self.v, s)


def init_critic(state_dim: int, action_dim: int,
                cfg: CriticConfig) -> CriticState:
    rng = SeededRng(cfg.seed, stream=41)
    q_in = state_dim + action_dim
    q1 = _relu_mlp_params(rng, q_in, cfg.hidden)
    q2 = _relu_mlp_params(rng, q_in, cfg.hidden)
    state = CriticState(
        q1=q1, q2=q2,
        q1_target={n: p.copy() for n, p in q1.items()},
        q2_target={n: p.copy() for n, p in q2.items()},
        v=_relu_mlp_params(rng, state_dim, cfg.hidden),
        config=cfg,
    )
    state.adam_q1 = init_adam(state.q1, lr=cfg.lr)
    state.adam_q2 = init_adam(state.q2, lr=cfg.lr)
    state.adam_v = init_adam(state.v, lr=cfg.lr)
    return state


def advantage(state: CriticState, s: np.ndarray, a: np.ndarray):
    """A(s, a) = min(Q1, Q2)(s, a) - V(s)."""
    adv = state.q_value(s, a) - state.value(s)
    return float(adv[0]) if np.ndim(s) == 1 else adv


def _sq_loss_and_grads(params, x, target):
    lifted = {n: ad.leaf(p, name=n) for n, p in params.items()}
    pred = _relu_mlp_forward(lifted, x)
    resid = ad.sub(pred, target.reshape(-1, 1))
    loss = ad.reduce_mean(ad.mul(resid, resid))
    grads = ad.vjp(loss)
    return float(ad.value_of(loss)), {n: ad.grad_of(grads, v)
                                      for n, v in lifted.items()}


def train_critic(transitions: Transitions,
                 cfg: CriticConfig) -> tuple[CriticState, dict]:
    """Alternate expectile V-updates and bootstrapped Q-updates.

    Per step: regress V toward min of the target Q-networks under the
    expectile loss, regress both Q-networks toward
    r + gamma (1 - done) V(s'), then soft-update the targets.
    """
    if len(transitions) < 1:
        raise CriticError("transition table is empty")
    state = init_critic(transitions.s.shape[1], transitions.a.shape[1], cfg)
    rng = SeededRng(cfg.seed, stream=42)
    tau = cfg.tau
    traces: dict[str, list] = {"step": [], "v_loss": [], "q_loss": []}
    n = len(transitions)
    for step in range(cfg.steps):
        idx = rng.integers(0, n, (cfg.batch,))
        s, a = transitions.s[idx], transitions.a[idx]
        r = transitions.r[idx]
        s_next = transitions.s_next[idx]
        done = transitions.done[idx]
        sa = np.column_stack([s, a])

        # V step: expectile regression against the conservative target Q
        qt = np.minimum(_eval_scalar_net(state.q1_target, sa),
                        _eval_scalar_net(state.q2_target, sa))
        lifted_v = {name: ad.leaf(p, name=name) for name, p in state.v.items()}
        v_pred = _relu_mlp_forward(lifted_v, s)
        u = ad.sub(qt.reshape(-1, 1), v_pred)
        asym = np.where(ad.value_of(u) < 0.0, 1.0 - tau, tau)
        v_loss = ad.reduce_mean(ad.mul(asym, ad.mul(u, u)))
        v_grads = ad.vjp(v_loss)
        v_loss_val = float(ad.value_of(v_loss))
        adam_step(state.v, {n_: ad.grad_of(v_grads, var)
                            for n_, var in lifted_v.items()}, state.adam_v)

        # Q step: one-step bootstrap through the (frozen) value network
        target = r + cfg.gamma * (1.0 - done.astype(np.float64)) \
            * _eval_scalar_net(state.v, s_next)
        q1_loss, g1 = _sq_loss_and_grads(state.q1, sa, target)
        adam_step(state.q1, g1, state.adam_q1)
        q2_loss, g2 = _sq_loss_and_grads(state.q2, sa, target)
        adam_step(state.q2, g2, state.adam_q2)

        soft_update(state.q1_target, state.q1, cfg.lam)
        soft_update(state.q2_target, state.q2, cfg.lam)

        q_loss_val = 0.5 * (q1_loss + q2_loss)
        if not (np.isfinite(v_loss_val) and np.isfinite(q_loss_val)):
            raise CriticError(f"non-finite critic loss at step {step}")
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            traces["step"].append(step)
            traces["v_loss"].append(v_loss_val)
            traces["q_loss"].append(q_loss_val)
    return state, traces


# --------------------------------------------------------------- weights

WEIGHT_KINDS = ("smooth_expectile", "exponential", "linex")


@dataclass(frozen=True)
class WeightSpec:
    """Choice of weight formulation over learned values.

    smooth_expectile: sigmoid(A) tau + (1 - sigmoid(A)) (1 - tau)
    exponential:      min(exp(beta A), clip_hi), floored away from zero
    linex:            alpha |exp(alpha u) - 1| / |u| at u = Q - V, with the
                      removable singularity at u = 0 filled by alpha^2
    """

    kind: str
    tau: float = 0.7
    beta: float = 3.0
    clip_hi: float = 80.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise CriticError(f"unknown weight kind '{self.kind}'")
        if not (0.0 < self.tau < 1.0):
            raise CriticError("tau must lie in (0, 1)")
        if self.clip_hi <= 0.0 or self.alpha <= 0.0:
            raise CriticError("clip_hi and alpha must be positive")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def weight_eval(spec: WeightSpec, advantage_value):
    """Strictly positive weight for an advantage (or Q - V) value."""
    u = np.asarray(advantage_value, dtype=np.float64)
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    if spec.kind == "smooth_expectile":
        sig = _sigmoid(u)
        w = sig * spec.tau + (1.0 - sig) * (1.0 - spec.tau)
    elif spec.kind == "exponential":
        w = np.minimum(np.exp(spec.beta * u), spec.clip_hi)
        w = np.maximum(w, _EXP_FLOOR)
    else:  # linex
        t = spec.alpha * u
        small = np.abs(t) < 1e-6
        safe = np.where(small, 1.0, u)
        w = spec.alpha * np.abs(np.expm1(t)) / np.abs(safe)
        # series of alpha |exp(t) - 1| / |u| around u = 0
        w = np.where(small,
                     spec.alpha**2 * (1.0 + 0.5 * t + t * t / 6.0), w)
    return float(w[0]) if scalar else w


def two_valued_expectile_weight(tau: float, advantage_value):
    """Diagnostic only: the raw two-valued weight |tau - 1{A < 0}|."""
    u = np.asarray(advantage_value, dtype=np.float64)
    return np.abs(tau - (u < 0.0).astype(np.float64))


# ------------------------------------------------------------ checkpoints

CRITIC_CHECKPOINT_VERSION = 1
_NET_NAMES = ("q1", "q2", "q1_target", "q2_target", "v")


def save_critic(path, state: CriticState, state_dim: int, action_dim: int,
                meta: dict | None = None) -> None:
    """Versioned JSON container mirroring the denoiser checkpoint layout."""
    import json
    from dataclasses import asdict

    payload = {
        "format_version": CRITIC_CHECKPOINT_VERSION,
        "kind": "critic",
        "config": asdict(state.config),
        "state_dim": state_dim,
        "action_dim": action_dim,
        "meta": meta or {},
        "params": {
            net: {n: {"shape": list(p.shape), "data": p.ravel().tolist()}
                  for n, p in getattr(state, net).items()}
            for net in _NET_NAMES
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_critic(path) -> tuple[CriticState, dict]:
    """Load a critic checkpoint, rejecting geometry mismatches."""
    import json

    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CRITIC_CHECKPOINT_VERSION \
            or payload.get("kind") != "critic":
        raise CriticError("not a supported critic checkpoint")
    cfg = CriticConfig(**payload["config"])
    state = init_critic(payload["state_dim"], payload["action_dim"], cfg)
    for net in _NET_NAMES:
        ref = getattr(state, net)
        stored = payload["params"][net]
        for name, r in ref.items():
            entry = stored.get(name)
            if entry is None or tuple(entry["shape"]) != r.shape:
                raise CriticError(
                    f"critic checkpoint parameter '{net}.{name}' missing or "
                    f"has wrong shape")
            ref[name] = np.asarray(entry["data"],
                                   dtype=np.float64).reshape(r.shape)
    return state, payload.get("meta", {})

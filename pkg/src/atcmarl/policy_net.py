"""Numpy actor-critic MLP with a clipped-surrogate PPO loss and hand-written backprop."""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, FeatureLayoutMismatch, NonFiniteLoss, UpdateRejected

log = logging.getLogger(__name__)

MODEL_FORMAT = "policy-net/1"
PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wp", "bp", "Wv", "bv")


@dataclass
class MlpParams:
    """Shared tanh trunk (two hidden layers) feeding a policy head and a value head."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wp: np.ndarray
    bp: np.ndarray
    Wv: np.ndarray
    bv: np.ndarray

    @classmethod
    def init(cls, obs_dim: int, n_actions: int = 3, hidden: tuple[int, int] = (256, 256), seed: int = 0) -> "MlpParams":
        rng = np.random.default_rng(seed)
        h1, h2 = hidden

        def glorot(fan_in, fan_out, gain=1.0):
            return rng.normal(0.0, gain * np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))

        return cls(
            glorot(obs_dim, h1), np.zeros(h1),
            glorot(h1, h2), np.zeros(h2),
            glorot(h2, n_actions, 0.01), np.zeros(n_actions),
            glorot(h2, 1), np.zeros(1),
        )

    @classmethod
    def zeros_like(cls, other: "MlpParams") -> "MlpParams":
        return cls(*(np.zeros_like(getattr(other, n)) for n in PARAM_NAMES))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "MlpParams":
        return MlpParams(*(a.copy() for a in self.arrays()))

    @property
    def obs_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def n_actions(self) -> int:
        return self.Wp.shape[1]

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


class RunningNormalizer:
    """Welford running mean/std over observation vectors."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.M2 = np.zeros(dim)
        self.frozen = False

    @property
    def std(self) -> np.ndarray:
        if self.count < 1:
            return np.ones_like(self.mean)
        return np.sqrt(self.M2 / self.count)

    def update(self, x: np.ndarray) -> None:
        if self.frozen:
            return
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n_b = len(x)
        if n_b == 0:
            return
        mean_b = x.mean(0)
        m2_b = ((x - mean_b) ** 2).sum(0)
        n = self.count + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * n_b / n
        self.M2 = self.M2 + m2_b + delta ** 2 * self.count * n_b / n
        self.count = n

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.count < 2:
            return np.asarray(x, dtype=float) - self.mean
        return (np.asarray(x, dtype=float) - self.mean) / np.maximum(self.std, 1e-8)

    def state(self) -> dict:
        return {"count": self.count, "mean": self.mean, "M2": self.M2}

    def copy(self) -> "RunningNormalizer":
        other = RunningNormalizer(len(self.mean))
        other.count, other.mean, other.M2, other.frozen = self.count, self.mean.copy(), self.M2.copy(), self.frozen
        return other


# -- forward / backward ----------------------------------------------------------

def _check_dim(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.obs_dim:
        raise DimensionMismatch(f"input dim {x.shape[1]} != network input dim {params.obs_dim}")
    return x


def _trunk(params: MlpParams, x: np.ndarray):
    h1 = np.tanh(x @ params.W1 + params.b1)
    h2 = np.tanh(h1 @ params.W2 + params.b2)
    return h1, h2


def forward(params: MlpParams, obs_normalized: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits (B x A) and values (B,) for a batch; a single vector gives B = 1."""
    x = _check_dim(params, obs_normalized)
    _, h2 = _trunk(params, x)
    return h2 @ params.Wp + params.bp, (h2 @ params.Wv + params.bv)[:, 0]


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


@dataclass
class LossCoefs:
    clip_eps: float = 0.3
    value: float = 0.5
    entropy: float = 0.01


@dataclass
class LossInfo:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    clip_frac: float


def ppo_loss(params: MlpParams, obs: np.ndarray, actions: np.ndarray, old_logp: np.ndarray,
             advantages: np.ndarray, returns: np.ndarray, coefs: LossCoefs | None = None) -> tuple[LossInfo, MlpParams]:
    """Clipped-surrogate PPO loss (to be minimized) and its exact gradient."""
    c = coefs or LossCoefs()
    x = _check_dim(params, obs)
    B = len(x)
    actions = np.asarray(actions, dtype=int)
    adv = np.asarray(advantages, dtype=float)
    ret = np.asarray(returns, dtype=float)
    h1, h2 = _trunk(params, x)
    z = h2 @ params.Wp + params.bp
    v = (h2 @ params.Wv + params.bv)[:, 0]
    logp_all = log_softmax(z)
    pi = np.exp(logp_all)
    rows = np.arange(B)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - c.clip_eps, 1.0 + c.clip_eps)
    surr1, surr2 = ratio * adv, clipped * adv
    surr = np.minimum(surr1, surr2)
    ent = -(pi * logp_all).sum(1)
    policy_loss = -surr.mean()
    value_loss = np.mean((v - ret) ** 2)
    entropy = ent.mean()
    loss = policy_loss + c.value * value_loss - c.entropy * entropy
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    # d surr / d logp: the unclipped branch carries gradient ratio*A, the clipped branch none
    g = np.where(surr1 <= surr2, ratio * adv, 0.0)
    onehot = np.zeros_like(z)
    onehot[rows, actions] = 1.0
    dz = -(g[:, None] * (onehot - pi)) / B
    dz += c.entropy * pi * (logp_all + ent[:, None]) / B
    dv = c.value * 2.0 * (v - ret) / B

    grads = MlpParams.zeros_like(params)
    grads.Wp = h2.T @ dz
    grads.bp = dz.sum(0)
    grads.Wv = h2.T @ dv[:, None]
    grads.bv = np.array([dv.sum()])
    dh2 = dz @ params.Wp.T + dv[:, None] @ params.Wv.T
    da2 = dh2 * (1.0 - h2 ** 2)
    grads.W2 = h1.T @ da2
    grads.b2 = da2.sum(0)
    da1 = (da2 @ params.W2.T) * (1.0 - h1 ** 2)
    grads.W1 = x.T @ da1
    grads.b1 = da1.sum(0)
    info = LossInfo(float(loss), float(policy_loss), float(value_loss), float(entropy),
                    float(np.mean(np.abs(ratio - 1.0) > c.clip_eps)))
    return info, grads


# -- optimizer -------------------------------------------------------------------

def global_norm(grads: MlpParams) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.arrays())))


def clip_by_global_norm(grads: MlpParams, max_norm: float) -> MlpParams:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return MlpParams(*(g * scale for g in grads.arrays()))


def sgd_update(params: MlpParams, grads: MlpParams, lr: float = 0.0005, max_norm: float | None = 0.5) -> MlpParams:
    """One plain SGD step after global-norm clipping. Raises UpdateRejected on non-finite output."""
    if max_norm is not None:
        grads = clip_by_global_norm(grads, max_norm)
    new = MlpParams(*(p - lr * g for p, g in zip(params.arrays(), grads.arrays())))
    if not new.all_finite():
        raise UpdateRejected("non-finite parameters after update")
    return new


class Sgd:
    """Stateful SGD with optional heavy-ball momentum (off by default)."""

    def __init__(self, lr: float = 0.0005, max_norm: float | None = 0.5, momentum: float = 0.0):
        self.lr = lr
        self.max_norm = max_norm
        self.momentum = momentum
        self._velocity: MlpParams | None = None

    def step(self, params: MlpParams, grads: MlpParams) -> MlpParams:
        if self.momentum == 0.0:
            return sgd_update(params, grads, self.lr, self.max_norm)
        if self.max_norm is not None:
            grads = clip_by_global_norm(grads, self.max_norm)
        if self._velocity is None:
            self._velocity = MlpParams.zeros_like(params)
        vel = MlpParams(*(self.momentum * v + g for v, g in zip(self._velocity.arrays(), grads.arrays())))
        new = MlpParams(*(p - self.lr * v for p, v in zip(params.arrays(), vel.arrays())))
        if not new.all_finite():
            raise UpdateRejected("non-finite parameters after update")
        self._velocity = vel
        return new


# -- acting ------------------------------------------------------------------------

def sample_action(params: MlpParams, normalizer: RunningNormalizer | None, obs: np.ndarray,
                  rng: np.random.Generator) -> tuple[int, float]:
    actions, logps, _ = sample_actions(params, normalizer, np.atleast_2d(obs), rng)
    return int(actions[0]), float(logps[0])


def sample_actions(params: MlpParams, normalizer: RunningNormalizer | None, obs: np.ndarray,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample one action per row; returns (actions, log-probs, values)."""
    x = normalizer(obs) if normalizer is not None else obs
    logits, values = forward(params, x)
    logp = log_softmax(logits)
    u = rng.random(len(logp))
    cdf = np.cumsum(np.exp(logp), axis=1)
    actions = np.minimum((u[:, None] > cdf).sum(1), logp.shape[1] - 1)
    return actions, logp[np.arange(len(logp)), actions], values


def greedy_actions(params: MlpParams, normalizer: RunningNormalizer | None, obs: np.ndarray) -> np.ndarray:
    x = normalizer(obs) if normalizer is not None else obs
    logits, _ = forward(params, x)
    return logits.argmax(1)


# -- rollout buffer -----------------------------------------------------------------

@dataclass
class RolloutBuffer:
    """Per-agent trajectories for one PPO iteration.

    Samples are appended with the agent-episode key they belong to; call
    ``compute_advantages`` once all trajectories are closed.
    """

    capacity: int = 1_000_000
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    logps: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    keys: list = field(default_factory=list)
    bootstrap: dict = field(default_factory=dict)
    returns: np.ndarray | None = None
    raw_advantages: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    def add(self, key, obs, action: int, logp: float, reward: float, value: float, done: bool) -> None:
        if len(self) >= self.capacity:
            raise OverflowError("rollout buffer is full")
        self.keys.append(key)
        self.obs.append(np.asarray(obs, dtype=float))
        self.actions.append(int(action))
        self.logps.append(float(logp))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.dones.append(bool(done))

    def truncate(self, key, last_value: float) -> None:
        """Mark an unfinished trajectory; its return is bootstrapped from ``last_value``."""
        self.bootstrap[key] = float(last_value)

    def clear(self) -> None:
        self.__init__(self.capacity)

    def arrays(self):
        return (np.array(self.obs), np.array(self.actions, dtype=int), np.array(self.logps),
                self.advantages, self.returns)


def advantage_returns(buffer: RolloutBuffer, gamma: float = 0.99, standardize: bool = True) -> RolloutBuffer:
    """Discounted reward-to-go per agent trajectory and A = R - V."""
    n = len(buffer)
    rewards = np.array(buffer.rewards)
    values = np.array(buffer.values)
    returns = np.zeros(n)
    by_key: dict = {}
    for i, k in enumerate(buffer.keys):
        by_key.setdefault(k, []).append(i)
    for k, idx in by_key.items():
        running = buffer.bootstrap.get(k, 0.0)
        for i in reversed(idx):
            if buffer.dones[i]:
                running = 0.0
            running = rewards[i] + gamma * running
            returns[i] = running
    raw = returns - values
    adv = raw.copy()
    if standardize and n > 1:
        std = adv.std()
        if std >= 1e-8:
            adv = (adv - adv.mean()) / std
    buffer.returns, buffer.raw_advantages, buffer.advantages = returns, raw, adv
    return buffer


# -- persistence ----------------------------------------------------------------------

def _enc(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


@dataclass
class PolicyModel:
    """Network parameters plus the observation normalizer and feature layout."""

    params: MlpParams
    normalizer: RunningNormalizer
    layout: str
    obs_variant: str  # "compact" or "extended"
    kind: str = "ppo"  # "ppo" or "ensemble"

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "kind": self.kind,
            "layout": self.layout,
            "obs_variant": self.obs_variant,
            "shapes": {n: list(getattr(self.params, n).shape) for n in PARAM_NAMES},
            "params": {n: _enc(getattr(self.params, n)) for n in PARAM_NAMES},
            "normalizer": {"count": self.normalizer.count, "mean": _enc(self.normalizer.mean),
                           "M2": _enc(self.normalizer.M2)},
        }

    @classmethod
    def from_dict(cls, doc: dict, expected_layout: str | None = None) -> "PolicyModel":
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a policy network artifact: {doc.get('format')!r}")
        if expected_layout is not None and doc["layout"] != expected_layout:
            raise FeatureLayoutMismatch(f"feature layout {doc['layout']!r} does not match {expected_layout!r}")
        params = MlpParams(*(_dec(doc["params"][n]) for n in PARAM_NAMES))
        norm = RunningNormalizer(params.obs_dim)
        norm.count = int(doc["normalizer"]["count"])
        norm.mean = _dec(doc["normalizer"]["mean"])
        norm.M2 = _dec(doc["normalizer"]["M2"])
        norm.frozen = True
        return cls(params, norm, doc["layout"], doc["obs_variant"], doc.get("kind", "ppo"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, expected_layout: str | None = None) -> "PolicyModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), expected_layout)

"""Kernel-based stochastic factorization (KBSF).

Random-policy transitions are compressed onto ``m`` representative states
found by k-means; two row-normalized Gaussian kernel matrices factor the
transition model into an m-state MDP, which policy iteration then solves.
Any observation is answered by kernel-averaging the solved Q-values.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, EmptyAction, FeatureLayoutMismatch, SingularEvaluation

log = logging.getLogger(__name__)

HOLD = 1
STD_FLOOR = 1e-8
DEFAULT_WIDTHS = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)
MODEL_FORMAT = "kbsf-model/1"


@dataclass
class TransitionSet:
    """Sample transitions binned by the action taken."""

    states: list[np.ndarray]
    rewards: list[np.ndarray]
    next_states: list[np.ndarray]

    @classmethod
    def from_samples(cls, s: np.ndarray, a: np.ndarray, r: np.ndarray, s_next: np.ndarray,
                     n_actions: int = 3) -> "TransitionSet":
        s, s_next = np.asarray(s, float), np.asarray(s_next, float)
        a, r = np.asarray(a, int), np.asarray(r, float)
        if s.ndim != 2 or s.shape != s_next.shape:
            raise DimensionMismatch("states and next states must be matching 2-D arrays")
        return cls(
            [s[a == k] for k in range(n_actions)],
            [r[a == k] for k in range(n_actions)],
            [s_next[a == k] for k in range(n_actions)],
        )

    @property
    def n_actions(self) -> int:
        return len(self.states)

    def counts(self) -> list[int]:
        return [len(r) for r in self.rewards]

    def all_states(self) -> np.ndarray:
        return np.concatenate([s for s in self.states if len(s)], axis=0)


# -- k-means -------------------------------------------------------------------

@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    sse_history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    closest = _sq_dists(x, x[idx]).ravel()
    for _ in range(1, m):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen center; take an unused index
            unused = np.setdiff1d(np.arange(n), idx)
            nxt = int(rng.choice(unused))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]]).ravel())
    return x[idx].copy()


def kmeans_fit(samples: np.ndarray, m: int, seed: int, tol: float = 1e-6, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding and farthest-point refill of empty clusters."""
    x = np.asarray(samples, dtype=float)
    n = len(x)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n_samples, got m={m}, n={n}")
    if m > 1 and np.all(x == x[0]):
        raise DegenerateInput("all samples identical; cannot form more than one cluster")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, m, rng)
    history: list[float] = []
    labels = np.zeros(n, dtype=int)
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centers)
        labels = d.argmin(1)
        point_d = d[np.arange(n), labels]
        history.append(float(point_d.sum()))
        counts = np.bincount(labels, minlength=m)
        new = centers.copy()
        for k in np.flatnonzero(counts):
            new[k] = x[labels == k].mean(0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            order = np.argsort(-point_d, kind="stable")
            taken = 0
            for k in empty:
                new[k] = x[order[taken]]
                taken += 1
        shift = float(np.sqrt(((new - centers) ** 2).sum(1)).max())
        centers = new
        if shift < tol:
            break
    d = _sq_dists(x, centers)
    labels = d.argmin(1)
    history.append(float(d[np.arange(n), labels].sum()))
    return KMeansResult(centers, labels, history, it)


def kmeans(samples: np.ndarray, m: int, seed: int) -> np.ndarray:
    return kmeans_fit(samples, m, seed).centers


# -- kernels ---------------------------------------------------------------------

def kernel_matrix(states: np.ndarray, refs: np.ndarray, tau: float) -> np.ndarray:
    """Row-normalized Gaussian kernel between each state and every reference.

    Entry (i, j) is exp(-(|s_i - ref_j| / tau)^2), divided by its row sum.
    The max exponent is subtracted per row, so a row never underflows to 0/0;
    in the extreme the mass lands on the nearest reference.
    """
    if tau <= 0:
        raise ValueError("kernel width must be positive")
    s = np.atleast_2d(np.asarray(states, dtype=float))
    r = np.atleast_2d(np.asarray(refs, dtype=float))
    if s.shape[1] != r.shape[1]:
        raise DimensionMismatch(f"state dim {s.shape[1]} != reference dim {r.shape[1]}")
    expo = -_sq_dists(s, r) / (tau * tau)
    expo -= expo.max(1, keepdims=True)
    k = np.exp(expo)
    return k / k.sum(1, keepdims=True)


def gaussian_kernel_row(s: np.ndarray, refs: np.ndarray, tau: float) -> np.ndarray:
    return kernel_matrix(np.asarray(s, float)[None, :], refs, tau)[0]


# -- factorized MDP --------------------------------------------------------------

def build_mdp(ts: TransitionSet, reps: np.ndarray, tau: float, tau_bar: float) -> tuple[np.ndarray, np.ndarray]:
    """Return (P, r) with P[a] an m x m stochastic matrix and r[a] an m-vector."""
    reps = np.asarray(reps, dtype=float)
    m = len(reps)
    P = np.empty((ts.n_actions, m, m))
    r = np.empty((ts.n_actions, m))
    for a in range(ts.n_actions):
        if len(ts.rewards[a]) == 0:
            raise EmptyAction(a)
        D = kernel_matrix(ts.next_states[a], reps, tau_bar)  # n_a x m
        K = kernel_matrix(reps, ts.states[a], tau)  # m x n_a
        P[a] = K @ D
        r[a] = K @ ts.rewards[a]
    return P, r


def policy_iteration(P: np.ndarray, r: np.ndarray, gamma: float = 0.99, max_iter: int = 1000) -> np.ndarray:
    """Howard policy iteration with exact evaluation. Returns Q as an m x |A| array."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    n_actions, m, _ = P.shape
    rows = np.arange(m)
    policy = r.argmax(0)
    eye = np.eye(m)
    for _ in range(max_iter):
        P_pi = P[policy, rows]
        r_pi = r[policy, rows]
        A = eye - gamma * P_pi
        try:
            v = np.linalg.solve(A, r_pi)
            # one step of iterative refinement
            v += np.linalg.solve(A, r_pi - A @ v)
        except np.linalg.LinAlgError as exc:
            raise SingularEvaluation(str(exc)) from None
        if not np.all(np.isfinite(v)):
            raise SingularEvaluation("non-finite policy value")
        q = r + gamma * (P @ v)  # |A| x m
        best = q.max(0)
        # keep the incumbent action on ties so the loop terminates
        keep = q[policy, rows] >= best - 1e-12 * np.maximum(1.0, np.abs(best))
        new_policy = np.where(keep, policy, q.argmax(0))
        if np.array_equal(new_policy, policy):
            break
        policy = new_policy
    return np.ascontiguousarray(q.T)


def value_iteration(P: np.ndarray, r: np.ndarray, gamma: float = 0.99, tol: float = 1e-10,
                    max_iter: int = 1_000_000) -> np.ndarray:
    q = np.zeros_like(r)
    for _ in range(max_iter):
        q_new = r + gamma * (P @ q.max(0))
        if np.abs(q_new - q).max() < tol:
            return q_new.T
        q = q_new
    return q.T


def bellman_residual(P: np.ndarray, r: np.ndarray, q: np.ndarray, gamma: float) -> float:
    v = q.max(1)
    return float(np.abs(r.T + gamma * (P @ v).T - q).max())


# -- model and query -----------------------------------------------------------

@dataclass
class KernelModel:
    rep_states: np.ndarray
    q_star: np.ndarray
    tau_bar: float
    feat_mean: np.ndarray
    feat_std: np.ndarray
    layout: str
    tau: float | None = None

    def __post_init__(self):
        self.feat_std = np.maximum(np.asarray(self.feat_std, float), STD_FLOOR)
        if not np.all(np.isfinite(self.q_star)):
            raise ValueError("q_star contains non-finite values")

    @property
    def dim(self) -> int:
        return self.rep_states.shape[1]

    def normalize(self, s: np.ndarray) -> np.ndarray:
        return (np.asarray(s, float) - self.feat_mean) / self.feat_std

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "layout": self.layout,
            "tau_bar": self.tau_bar,
            "tau": self.tau,
            "feat_mean": self.feat_mean.tolist(),
            "feat_std": self.feat_std.tolist(),
            "rep_states": self.rep_states.tolist(),
            "q_star": self.q_star.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict, expected_layout: str | None = None) -> "KernelModel":
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a kernel model artifact: {doc.get('format')!r}")
        if expected_layout is not None and doc["layout"] != expected_layout:
            raise FeatureLayoutMismatch(f"feature layout {doc['layout']!r} does not match {expected_layout!r}")
        return cls(
            rep_states=np.array(doc["rep_states"], dtype=float),
            q_star=np.array(doc["q_star"], dtype=float),
            tau_bar=float(doc["tau_bar"]),
            feat_mean=np.array(doc["feat_mean"], dtype=float),
            feat_std=np.array(doc["feat_std"], dtype=float),
            layout=doc["layout"],
            tau=doc.get("tau"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, expected_layout: str | None = None) -> "KernelModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), expected_layout)


def greedy_action(q: np.ndarray) -> int:
    """Argmax with ties broken toward Hold, then the lowest index."""
    best = q.max()
    if q[HOLD] == best:
        return HOLD
    return int(np.flatnonzero(q == best)[0])


def kernel_q(s_raw: np.ndarray, model: KernelModel) -> np.ndarray:
    s = np.asarray(s_raw, dtype=float)
    if s.shape != (model.dim,):
        raise DimensionMismatch(f"observation has shape {s.shape}, model expects ({model.dim},)")
    w = gaussian_kernel_row(model.normalize(s), model.rep_states, model.tau_bar)
    return w @ model.q_star


def kernel_policy(s_raw: np.ndarray, model: KernelModel) -> tuple[int, np.ndarray]:
    q = kernel_q(s_raw, model)
    return greedy_action(q), q


def kernel_policy_batch(obs: np.ndarray, model: KernelModel) -> tuple[np.ndarray, np.ndarray]:
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    if obs.shape[1] != model.dim:
        raise DimensionMismatch(f"observation dim {obs.shape[1]} != model dim {model.dim}")
    q = kernel_matrix(model.normalize(obs), model.rep_states, model.tau_bar) @ model.q_star
    return np.array([greedy_action(row) for row in q], dtype=int), q


# -- end-to-end solver -----------------------------------------------------------

@dataclass
class KbsfFit:
    """Normalized samples and representative states, reusable across kernel widths."""

    ts_norm: TransitionSet
    reps: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray
    layout: str


def prepare(ts: TransitionSet, m: int, seed: int, layout: str) -> KbsfFit:
    states = ts.all_states()
    mean = states.mean(0)
    std = np.maximum(states.std(0), STD_FLOOR)
    norm = TransitionSet(
        [(s - mean) / std for s in ts.states],
        [r.copy() for r in ts.rewards],
        [(s - mean) / std for s in ts.next_states],
    )
    reps = kmeans(norm.all_states(), m, seed)
    return KbsfFit(norm, reps, mean, std, layout)


def solve(fit: KbsfFit, tau: float, tau_bar: float | None = None, gamma: float = 0.99) -> KernelModel:
    tau_bar = tau if tau_bar is None else tau_bar
    P, r = build_mdp(fit.ts_norm, fit.reps, tau, tau_bar)
    q = policy_iteration(P, r, gamma)
    return KernelModel(fit.reps, q, tau_bar, fit.feat_mean, fit.feat_std, fit.layout, tau=tau)


def grid_search_width(candidates: Sequence[float], score: Callable[[float], float]) -> tuple[float, list[tuple[float, float]]]:
    """Return the candidate width with the highest ``score`` and the full sweep.

    Ties go to the earlier candidate.
    """
    if not candidates:
        raise ValueError("no kernel width candidates")
    sweep = []
    best, best_score = candidates[0], -np.inf
    for tau in candidates:
        val = float(score(tau))
        sweep.append((float(tau), val))
        log.info("kernel width %g -> mean reward %.4f", tau, val)
        if val > best_score:
            best, best_score = tau, val
    return float(best), sweep

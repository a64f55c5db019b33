"""Training loops (shared-policy PPO, ensemble master), benchmark policies and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import kbsf
from .errors import CloneUnsupported, FeatureLayoutMismatch, UpdateRejected
from .kbsf import KernelModel, TransitionSet
from .policy_net import (
    LossCoefs, MlpParams, PolicyModel, RolloutBuffer, RunningNormalizer, Sgd,
    advantage_returns, forward, greedy_actions, ppo_loss, sample_actions,
)
from .scenario import Scenario
from .sim import N_ACTIONS, Action, AtcEnv, StepResult

log = logging.getLogger(__name__)

KERNEL, DEEP = 0, 1  # master actions


def _obs_matrix(result: StepResult, ids: Sequence[str], variant: str) -> np.ndarray:
    obs = result.observations()
    return np.array([getattr(obs[f], variant) for f in ids])


# -- benchmark policies ------------------------------------------------------------

class BaselinePolicy:
    """Move toward the scheduled segment speed, holding when already closest."""

    name = "baseline"

    def __call__(self, env: AtcEnv, result: StepResult) -> dict[str, int]:
        return {fid: baseline_action(env, fid) for fid in result.acting()}


def baseline_action(env: AtcEnv, fid: str) -> int:
    ac = env.aircraft[fid]
    target = env.scheduled_speed(fid)
    lo, hi = env.speed_bounds(fid)
    step = env.weights.delta_speed
    best, best_gap = Action.HOLD, abs(ac.speed - target)
    for act in (Action.DECREASE, Action.INCREASE):
        v = min(max(ac.speed + act.delta * step, lo), hi)
        gap = abs(v - target)
        if gap < best_gap:
            best, best_gap = act, gap
    return int(best)


def one_step_reward(env: AtcEnv, joint: Mapping[str, int]) -> float:
    """Global reward of applying ``joint`` for one step; the environment is left unchanged."""
    snap = env.snapshot()
    try:
        result = env.step(joint, compute_obs=False)
        return float(sum(a.reward for a in result.agents.values()))
    finally:
        env.restore(snap)


class LocalSearchPolicy:
    """Myopic best response per aircraft with every other aircraft holding its speed.

    The per-aircraft improvements are combined into a joint action, which is
    kept only if its one-step global reward is at least that of the baseline
    joint action.
    """

    name = "local_search"

    def __init__(self):
        self.log: list[dict] = []

    def __call__(self, env: AtcEnv, result: StepResult) -> dict[str, int]:
        if not hasattr(env, "snapshot"):
            raise CloneUnsupported(type(env).__name__)
        acting = result.acting()
        if not acting:
            return {}
        hold = {fid: int(Action.HOLD) for fid in acting}
        base_val = one_step_reward(env, hold)
        joint = {}
        for fid in acting:
            best, best_val = int(Action.HOLD), base_val
            for act in (Action.DECREASE, Action.INCREASE):
                trial = dict(hold)
                trial[fid] = int(act)
                val = one_step_reward(env, trial)
                if val > best_val:
                    best, best_val = int(act), val
            joint[fid] = best
        baseline = {fid: baseline_action(env, fid) for fid in acting}
        ls_val = one_step_reward(env, joint)
        bl_val = one_step_reward(env, baseline)
        chosen = joint if ls_val >= bl_val else baseline
        self.log.append({"step": result.step, "local": ls_val, "baseline": bl_val,
                         "chosen": max(ls_val, bl_val)})
        return chosen


class KernelPolicy:
    name = "kernel"

    def __init__(self, model: KernelModel):
        self.model = model

    def __call__(self, env, result: StepResult) -> dict[str, int]:
        ids = result.acting()
        if not ids:
            return {}
        acts, _ = kbsf.kernel_policy_batch(_obs_matrix(result, ids, "compact"), self.model)
        return dict(zip(ids, map(int, acts)))


class PpoPolicy:
    name = "ppo"

    def __init__(self, model: PolicyModel, greedy: bool = True, seed: int = 0):
        self.model = model
        self.greedy = greedy
        self.rng = np.random.default_rng(seed)

    def actions(self, obs: np.ndarray) -> np.ndarray:
        if self.greedy:
            return greedy_actions(self.model.params, self.model.normalizer, obs)
        return sample_actions(self.model.params, self.model.normalizer, obs, self.rng)[0]

    def __call__(self, env, result: StepResult) -> dict[str, int]:
        ids = result.acting()
        if not ids:
            return {}
        acts = self.actions(_obs_matrix(result, ids, self.model.obs_variant))
        return dict(zip(ids, map(int, acts)))


def check_ensemble_layouts(kernel: KernelModel, ppo: PolicyModel) -> None:
    if kernel.layout != ppo.layout:
        raise FeatureLayoutMismatch(f"kernel layout {kernel.layout!r} != deep policy layout {ppo.layout!r}")


class EnsemblePolicy:
    """Master network choosing per agent whether the kernel or the deep policy acts."""

    name = "ensemble"

    def __init__(self, master: PolicyModel, kernel: KernelModel | Callable, ppo: PolicyModel | Callable,
                 greedy: bool = True, seed: int = 0, record: bool = False):
        self.master = master
        self.kernel_fn = kernel if callable(kernel) else _kernel_fn(kernel)
        self.ppo_fn = ppo if callable(ppo) else _ppo_fn(ppo, greedy, seed)
        self.greedy = greedy
        self.rng = np.random.default_rng(seed)
        self.record = record
        self.trace: list[dict] = []

    def __call__(self, env, result: StepResult) -> dict[str, int]:
        ids = result.acting()
        if not ids:
            return {}
        compact = _obs_matrix(result, ids, "compact")
        if self.greedy:
            choice = greedy_actions(self.master.params, self.master.normalizer, compact)
        else:
            choice = sample_actions(self.master.params, self.master.normalizer, compact, self.rng)[0]
        executed = _delegate(choice, ids, result, self.kernel_fn, self.ppo_fn)
        if self.record:
            self.trace.append({"step": result.step, "ids": list(ids), "master": choice.tolist(),
                               "executed": [executed[f] for f in ids]})
        return executed


class SubPolicy:
    """Observation matrix -> actions, tagged with the observation form it consumes."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], variant: str = "compact"):
        self.fn = fn
        self.variant = variant

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return self.fn(obs)


def _kernel_fn(model: KernelModel) -> SubPolicy:
    return SubPolicy(lambda obs: kbsf.kernel_policy_batch(obs, model)[0], "compact")


def _ppo_fn(model: PolicyModel, greedy: bool, seed: int) -> SubPolicy:
    return SubPolicy(PpoPolicy(model, greedy, seed).actions, model.obs_variant)


def _delegate(choice: np.ndarray, ids: list[str], result: StepResult, kernel_fn, ppo_fn) -> dict[str, int]:
    executed: dict[str, int] = {}
    for which, fn in ((KERNEL, kernel_fn), (DEEP, ppo_fn)):
        sel = [f for f, c in zip(ids, choice) if c == which]
        if sel:
            acts = fn(_obs_matrix(result, sel, getattr(fn, "variant", "compact")))
            executed.update(zip(sel, map(int, acts)))
    return executed


# -- PPO training ------------------------------------------------------------------

@dataclass
class PpoConfig:
    iterations: int = 300
    gamma: float = 0.99
    lr: float = 0.0005
    clip_eps: float = 0.3
    minibatch: int = 128
    updates_per_iter: int = 8  # M minibatch gradient steps per iteration
    hidden: tuple[int, int] = (256, 256)
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    momentum: float = 0.0
    reward_scale: float = 1.0
    normalize_returns: bool = True
    obs_variant: str = "extended"
    seed: int = 0
    max_reject_streak: int = 10


@dataclass
class TrainResult:
    model: PolicyModel
    curve: list[dict]


class _ReturnScaler:
    def __init__(self):
        self.stats = RunningNormalizer(1)

    def fit(self, returns: np.ndarray) -> None:
        self.stats.update(returns[:, None])

    @property
    def mean(self) -> float:
        return float(self.stats.mean[0]) if self.stats.count > 1 else 0.0

    @property
    def std(self) -> float:
        return float(max(self.stats.std[0], 1e-8)) if self.stats.count > 1 else 1.0


def _ppo_updates(params: MlpParams, opt: Sgd, buffer: RolloutBuffer, cfg: PpoConfig, rng: np.random.Generator,
                 scaler: _ReturnScaler | None, streak: list[int]) -> tuple[MlpParams, list[float]]:
    obs, actions, logps, adv, returns = buffer.arrays()
    if scaler is not None:
        targets = (returns - scaler.mean) / scaler.std
    else:
        targets = returns
    coefs = LossCoefs(cfg.clip_eps, cfg.value_coef, cfg.entropy_coef)
    losses = []
    n = len(buffer)
    for _ in range(cfg.updates_per_iter):
        idx = rng.choice(n, size=min(cfg.minibatch, n), replace=False)
        info, grads = ppo_loss(params, obs[idx], actions[idx], logps[idx], adv[idx], targets[idx], coefs)
        try:
            params = opt.step(params, grads)
            streak[0] = 0
        except UpdateRejected:
            streak[0] += 1
            log.warning("update rejected (streak %d)", streak[0])
            if streak[0] > cfg.max_reject_streak:
                raise
        losses.append(info.loss)
    return params, losses


def _values(params: MlpParams, x: np.ndarray, scaler: _ReturnScaler | None) -> np.ndarray:
    _, v = forward(params, x)
    return v * scaler.std + scaler.mean if scaler is not None else v


def _rollout(env, scenario: Scenario, choose: Callable, params: MlpParams, normalizer: RunningNormalizer,
             variant: str, rng: np.random.Generator, scaler, cfg: PpoConfig, buffer: RolloutBuffer, it: int,
             on_step: Callable | None = None) -> tuple[float, int]:
    """Roll out one episode with the policy being trained; returns (total reward, agents seen)."""
    result = env.reset(scenario)
    total, seen = 0.0, set()
    while not result.episode_done:
        ids = result.acting()
        joint: dict[str, int] = {}
        pending = {}
        if ids:
            raw = _obs_matrix(result, ids, variant)
            normalizer.update(raw)
            x = normalizer(raw)
            acts, logps, _ = sample_actions(params, None, x, rng)
            values = _values(params, x, scaler)
            joint = choose(ids, acts, result)
            pending = {f: (x[k], int(acts[k]), float(logps[k]), float(values[k])) for k, f in enumerate(ids)}
        if on_step is not None:
            on_step(result, ids, pending, joint)
        result = env.step(joint)
        for fid, (x_i, a_i, lp_i, v_i) in pending.items():
            st = result.agents[fid]
            total += st.reward
            seen.add(fid)
            buffer.add((it, fid), x_i, a_i, lp_i, st.reward * cfg.reward_scale, v_i, st.done)
    return total, len(seen)


def _ppo_loop(env_factory, scenarios: Sequence[Scenario], cfg: PpoConfig, obs_dim: int, n_actions: int,
              choose: Callable, variant: str, kind: str, layout: str,
              callback: Callable | None = None) -> TrainResult:
    if not scenarios:
        raise ValueError("need at least one training scenario")
    rng = np.random.default_rng(cfg.seed)
    params = MlpParams.init(obs_dim, n_actions, cfg.hidden, seed=cfg.seed)
    normalizer = RunningNormalizer(obs_dim)
    scaler = _ReturnScaler() if cfg.normalize_returns else None
    opt = Sgd(cfg.lr, cfg.max_grad_norm, cfg.momentum)
    env = env_factory()
    curve = []
    streak = [0]
    for it in range(cfg.iterations):
        sc_idx = int(rng.integers(len(scenarios)))
        buffer = RolloutBuffer()
        total, n_agents = _rollout(env, scenarios[sc_idx], choose, params, normalizer, variant, rng,
                                   scaler, cfg, buffer, it)
        losses: list[float] = []
        if len(buffer):
            advantage_returns(buffer, cfg.gamma)
            if scaler is not None:
                scaler.fit(buffer.returns)
            params, losses = _ppo_updates(params, opt, buffer, cfg, rng, scaler, streak)
        row = {"iteration": it, "scenario": sc_idx,
               "mean_reward": total / n_agents if n_agents else 0.0,
               "samples": len(buffer), "loss": float(np.mean(losses)) if losses else 0.0}
        curve.append(row)
        if callback is not None:
            callback(row)
    normalizer.frozen = True
    return TrainResult(PolicyModel(params, normalizer, layout, variant, kind), curve)


def train_marl(env_factory: Callable[[], AtcEnv], scenarios: Sequence[Scenario], cfg: PpoConfig | None = None,
               callback: Callable | None = None) -> TrainResult:
    """Decentralized PPO: every agent acts with, and feeds samples to, one shared policy."""
    cfg = cfg or PpoConfig()
    env = env_factory()
    first = env.reset(scenarios[0])
    probe = _probe_dim(env, scenarios[0], first, cfg.obs_variant)

    def choose(ids, acts, result):
        return {f: int(a) for f, a in zip(ids, acts)}

    return _ppo_loop(env_factory, scenarios, cfg, probe, N_ACTIONS, choose, cfg.obs_variant, "ppo",
                     env.layout, callback)


def _probe_dim(env, scenario, result: StepResult, variant: str) -> int:
    while not result.observations():
        if result.episode_done:
            raise ValueError("scenario never activates an aircraft")
        result = env.step({f: int(Action.HOLD) for f in result.acting()})
    return len(getattr(next(iter(result.observations().values())), variant))


@dataclass
class EnsembleTrace:
    """Per-step delegation log: master choice and executed action for each agent."""

    rows: list[dict] = field(default_factory=list)


def train_ensemble(env_factory: Callable[[], AtcEnv], kernel: KernelModel | Callable, ppo: PolicyModel | Callable,
                   scenarios: Sequence[Scenario], cfg: PpoConfig | None = None, callback: Callable | None = None,
                   trace: EnsembleTrace | None = None, layout: str | None = None) -> TrainResult:
    """Train the binary master over frozen kernel and deep policies.

    The master sees compact observations. Action 0 executes the kernel
    policy's greedy action, action 1 samples the deep policy. Stored
    transitions carry the master's own action and the observed reward.
    Sub-policies may be given as callables mapping an observation matrix to
    actions (their ``variant`` attribute names the observation form).
    """
    cfg = cfg or PpoConfig(obs_variant="compact")
    if isinstance(kernel, KernelModel) and isinstance(ppo, PolicyModel):
        check_ensemble_layouts(kernel, ppo)
    kernel_fn = kernel if callable(kernel) else _kernel_fn(kernel)
    ppo_fn = ppo if callable(ppo) else _ppo_fn(ppo, greedy=False, seed=cfg.seed + 1)
    env = env_factory()
    obs_dim = _probe_dim(env, scenarios[0], env.reset(scenarios[0]), "compact")
    if isinstance(kernel, KernelModel) and kernel.dim != obs_dim:
        raise FeatureLayoutMismatch(f"kernel model expects dim {kernel.dim}, observations have {obs_dim}")

    def choose(ids, master_acts, result):
        executed = _delegate(master_acts, ids, result, kernel_fn, ppo_fn)
        if trace is not None:
            trace.rows.append({"ids": list(ids), "master": [int(a) for a in master_acts],
                               "executed": [executed[f] for f in ids]})
        return executed

    if layout is None:
        layout = kernel.layout if isinstance(kernel, KernelModel) else getattr(env, "layout", "custom")
    return _ppo_loop(env_factory, scenarios, _with_variant(cfg, "compact"), obs_dim, 2, choose, "compact",
                     "ensemble", layout, callback)


def _with_variant(cfg: PpoConfig, variant: str) -> PpoConfig:
    d = asdict(cfg)
    d["obs_variant"] = variant
    d["hidden"] = tuple(d["hidden"])
    return PpoConfig(**d)


# -- KBSF sample collection and training --------------------------------------------

def collect_random(env_factory: Callable[[], AtcEnv], scenarios: Sequence[Scenario], n: int, seed: int,
                   variant: str = "compact") -> TransitionSet:
    """Gather exactly ``n`` transitions under a uniformly random joint policy."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    env = env_factory()
    s, a, r, s2 = [], [], [], []
    while len(r) < n:
        scenario = scenarios[int(rng.integers(len(scenarios)))]
        result = env.reset(scenario)
        while not result.episode_done and len(r) < n:
            ids = result.acting()
            acts = rng.integers(N_ACTIONS, size=len(ids))
            obs = result.observations()
            result = env.step({f: int(x) for f, x in zip(ids, acts)})
            for f, x in zip(ids, acts):
                st = result.agents[f]
                s.append(getattr(obs[f], variant))
                a.append(int(x))
                r.append(st.reward)
                s2.append(getattr(st.observation, variant))
    s, a, r, s2 = s[:n], a[:n], r[:n], s2[:n]
    return TransitionSet.from_samples(np.array(s), np.array(a), np.array(r), np.array(s2), N_ACTIONS)


@dataclass
class KbsfConfig:
    n: int = 50_000
    m: int = 200
    gamma: float = 0.99
    widths: tuple[float, ...] = kbsf.DEFAULT_WIDTHS
    seed: int = 0


def train_kbsf(env_factory: Callable[[], AtcEnv], scenarios: Sequence[Scenario], validation: Sequence[Scenario],
               cfg: KbsfConfig | None = None) -> tuple[KernelModel, list[tuple[float, float]]]:
    """Collect random transitions, factorize, and pick the kernel width on ``validation``."""
    cfg = cfg or KbsfConfig()
    env = env_factory()
    ts = collect_random(env_factory, scenarios, cfg.n, cfg.seed)
    fit = kbsf.prepare(ts, cfg.m, cfg.seed, env.layout)
    models: dict[float, KernelModel] = {}

    def score(tau: float) -> float:
        models[tau] = kbsf.solve(fit, tau, tau, cfg.gamma)
        return evaluate(KernelPolicy(models[tau]), validation, env_factory).mean_reward

    best, sweep = kbsf.grid_search_width(list(cfg.widths), score)
    return models[best], sweep


# -- evaluation ------------------------------------------------------------------------

@dataclass
class ScenarioReport:
    scenario: int
    mean_reward: float
    n_agents: int
    conflicts: int
    conflict_agent_steps: int
    congestion_events: int
    delay_km: float
    fuel_penalty: float
    actions: list[int]


@dataclass
class EvalReport:
    policy: str
    mean_reward: float
    stderr: float
    conflicts: int
    congestion_events: int
    delay_km: float
    fuel_penalty: float
    action_distribution: list[float]
    scenarios: list[ScenarioReport]
    gain: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def run_policy_episode(env: AtcEnv, scenario: Scenario, policy: Callable) -> ScenarioReport:
    result = env.reset(scenario)
    per_agent: dict[str, float] = {}
    counts = [0] * N_ACTIONS
    conflicts = conflict_steps = congestion = 0
    delay = fuel = 0.0
    while not result.episode_done:
        joint = policy(env, result)
        for a in joint.values():
            counts[int(a)] += 1
        result = env.step(joint)
        conflicts += result.conflict_pairs
        for fid, st in result.agents.items():
            per_agent[fid] = per_agent.get(fid, 0.0) + st.reward
            conflict_steps += int(st.terms[0])
            congestion += int(st.terms[1])
            delay += st.terms[2]
            fuel += env.weights.delta * st.terms[3]
    mean = float(np.mean(list(per_agent.values()))) if per_agent else 0.0
    return ScenarioReport(getattr(scenario, "seed", 0), mean, len(per_agent), conflicts, conflict_steps,
                          congestion, delay, fuel, counts)


def evaluate(policy, scenarios: Sequence[Scenario], env_factory: Callable[[], AtcEnv],
             baseline: EvalReport | None = None, name: str | None = None) -> EvalReport:
    env = env_factory()
    reports = []
    for k, sc in enumerate(scenarios):
        rep = run_policy_episode(env, sc, policy)
        rep.scenario = k
        reports.append(rep)
    means = np.array([r.mean_reward for r in reports])
    stderr = float(means.std(ddof=1) / math.sqrt(len(means))) if len(means) > 1 else 0.0
    counts = np.sum([r.actions for r in reports], axis=0).astype(float)
    dist = (counts / counts.sum()).tolist() if counts.sum() > 0 else [0.0] * N_ACTIONS
    report = EvalReport(
        policy=name or getattr(policy, "name", type(policy).__name__),
        mean_reward=float(means.mean()),
        stderr=stderr,
        conflicts=int(sum(r.conflicts for r in reports)),
        congestion_events=int(sum(r.congestion_events for r in reports)),
        delay_km=float(sum(r.delay_km for r in reports)),
        fuel_penalty=float(sum(r.fuel_penalty for r in reports)),
        action_distribution=dist,
        scenarios=reports,
    )
    if baseline is not None:
        report.gain = gain(report.mean_reward, baseline.mean_reward)
    return report


def gain(reward: float, baseline_reward: float) -> float:
    """Relative improvement over the baseline: (reward - baseline) / |baseline|."""
    if baseline_reward == 0:
        return 0.0 if reward == 0 else math.copysign(math.inf, reward)
    return (reward - baseline_reward) / abs(baseline_reward)


def write_curve(curve: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in curve:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# -- ensemble artifact -------------------------------------------------------------------

ENSEMBLE_FORMAT = "ensemble-model/1"


def save_ensemble(path: str | Path, master: PolicyModel, kernel: KernelModel, ppo: PolicyModel) -> None:
    """One self-contained file holding the master and both frozen sub-policies."""
    doc = {"format": ENSEMBLE_FORMAT, "master": master.to_dict(), "kernel": kernel.to_dict(),
           "ppo": ppo.to_dict()}
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_ensemble(path: str | Path) -> tuple[PolicyModel, KernelModel, PolicyModel]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != ENSEMBLE_FORMAT:
        raise ValueError(f"not an ensemble artifact: {doc.get('format')!r}")
    kernel = KernelModel.from_dict(doc["kernel"])
    ppo = PolicyModel.from_dict(doc["ppo"], expected_layout=kernel.layout)
    master = PolicyModel.from_dict(doc["master"], expected_layout=kernel.layout)
    return master, kernel, ppo

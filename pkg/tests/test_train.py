import math

import numpy as np
import pytest

from atcmarl import policy_net as pn
from atcmarl.errors import CloneUnsupported, FeatureLayoutMismatch
from atcmarl.geo import GeoPoint
from atcmarl.kbsf import KernelModel
from atcmarl.policy_net import MlpParams, PolicyModel, RunningNormalizer
from atcmarl.sim import Action, AtcEnv, RewardWeights
from atcmarl.train import (BaselinePolicy, EnsemblePolicy, EnsembleTrace, LocalSearchPolicy, PpoConfig, SubPolicy,
                           baseline_action, evaluate, gain, load_ensemble, one_step_reward, save_ensemble,
                           train_ensemble, train_marl)

from helpers import offset, scenario_of, straight_plan
from toy_env import ToyEnv

TOY_CFG = dict(hidden=(32, 32), lr=0.05, obs_variant="compact")
PROBE = np.random.default_rng(99).normal(size=(500, 16))


def _probs(model):
    return pn.softmax(pn.forward(model.params, model.normalizer(PROBE))[0]).mean(0)


def _always(action):
    return SubPolicy(lambda obs: np.full(len(obs), action))


# -- shared-policy PPO ---------------------------------------------------------------

def test_ppo_learns_increase_bandit():
    fac = lambda: ToyEnv(lambda o, a: 1.0 if a == 2 else 0.0, n_agents=8)
    res = train_marl(fac, list(range(10)), PpoConfig(iterations=200, **TOY_CFG))
    assert _probs(res.model)[2] > 0.9
    assert len(res.curve) == 200 and res.curve[-1]["mean_reward"] > res.curve[0]["mean_reward"]


def test_ppo_zero_reward_curve():
    fac = lambda: ToyEnv(lambda o, a: 0.0)
    res = train_marl(fac, list(range(3)), PpoConfig(iterations=20, **TOY_CFG))
    assert all(row["mean_reward"] == 0.0 for row in res.curve)
    assert res.model.params.all_finite()


def test_ppo_deterministic():
    fac = lambda: ToyEnv(lambda o, a: float(o[0] > 0) * (a == 2) - 0.1 * (a == 0))
    runs = [train_marl(fac, list(range(4)), PpoConfig(iterations=15, seed=3, **TOY_CFG)) for _ in range(2)]
    assert runs[0].curve == runs[1].curve
    for a, b in zip(runs[0].model.params.arrays(), runs[1].model.params.arrays()):
        assert np.array_equal(a, b)


def test_ppo_on_simulator_runs():
    p = straight_plan("A", GeoPoint(44.0, 0.0, 10000.0), GeoPoint(44.0, 3.0, 10000.0))
    res = train_marl(AtcEnv, [scenario_of([p], horizon=20)], PpoConfig(iterations=2, hidden=(8, 8)))
    assert res.model.params.obs_dim == 34 and res.model.layout == AtcEnv().layout


# -- baseline ------------------------------------------------------------------------

def _single_env(weights=None, speed=230.0):
    p = straight_plan("A", GeoPoint(44.0, 0.0, 10000.0), GeoPoint(44.0, 8.0, 10000.0), speed=speed)
    env = AtcEnv(weights or RewardWeights())
    result = env.reset(scenario_of([p], horizon=200))
    return env, result


def test_baseline_examples():
    env, _ = _single_env()
    assert baseline_action(env, "A") == Action.HOLD
    env.aircraft["A"].speed = 230.0 - 20.0
    assert baseline_action(env, "A") == Action.INCREASE
    env.aircraft["A"].speed = 230.0 + 10.0
    assert baseline_action(env, "A") == Action.DECREASE


def _parallel_scenario(n=4, horizon=100):
    plans = [straight_plan(f"F{k}", GeoPoint(40.0 + k, 0.0, 10000.0), GeoPoint(40.0 + k, 6.0, 10000.0),
                           speed=220.0 + 5 * k, n_points=4) for k in range(n)]
    return scenario_of(plans, horizon=horizon)


def test_baseline_unperturbed_run_is_on_schedule():
    sc = _parallel_scenario()
    rep = evaluate(BaselinePolicy(), [sc], AtcEnv)
    assert rep.scenarios[0].delay_km / rep.scenarios[0].n_agents < 1.0
    assert rep.conflicts == 0 and rep.congestion_events == 0
    assert abs(rep.fuel_penalty) < 1e-9
    assert abs(rep.mean_reward) < 1.0


# -- local search -----------------------------------------------------------------------

def test_local_search_behind_schedule_increases():
    env, result = _single_env(RewardWeights(delta=0.0))
    for _ in range(5):
        result = env.step({"A": int(Action.DECREASE)})
    assert LocalSearchPolicy()(env, result) == {"A": int(Action.INCREASE)}


def test_local_search_on_schedule_holds():
    env, result = _single_env()
    assert LocalSearchPolicy()(env, result) == {"A": int(Action.HOLD)}


def test_local_search_avoids_separation_loss():
    # B trails A by 10.5 km on the same track and is faster: holding closes the gap below R_s
    a0 = GeoPoint(44.0, 0.0, 10000.0)
    far = GeoPoint(44.0, 8.0, 10000.0)
    pa = straight_plan("A", a0, far, speed=220.0)
    pb = straight_plan("B", offset(a0, km_east=-10.5), far, speed=230.0)
    env = AtcEnv(RewardWeights(delta=0.0, gamma=0.0))
    result = env.reset(scenario_of([pa, pb], horizon=50))
    hold = {"A": int(Action.HOLD), "B": int(Action.HOLD)}
    assert one_step_reward(env, hold) <= -1000.0
    joint = LocalSearchPolicy()(env, result)
    assert any(a != Action.HOLD for a in joint.values())
    assert one_step_reward(env, joint) > -1000.0


def test_local_search_never_worse_than_baseline_and_leaves_env_intact():
    sc = _parallel_scenario(6, horizon=40)
    ls = LocalSearchPolicy()
    env = AtcEnv()
    result = env.reset(sc)
    while not result.episode_done:
        before = env.snapshot()
        joint = ls(env, result)
        assert env.snapshot() == before
        result = env.step(joint)
    assert ls.log and all(row["chosen"] >= row["baseline"] for row in ls.log)


def test_local_search_requires_clone():
    class NoClone:
        pass
    with pytest.raises(CloneUnsupported):
        LocalSearchPolicy()(NoClone(), None)


# -- ensemble ---------------------------------------------------------------------------

def test_ensemble_master_picks_optimal_subpolicy():
    fac = lambda: ToyEnv(lambda o, a: 1.0 if a == 2 else -1.0, n_agents=8)
    res = train_ensemble(fac, _always(2), _always(0), list(range(10)), PpoConfig(iterations=200, **TOY_CFG))
    assert _probs(res.model)[0] >= 0.9
    assert res.model.kind == "ensemble" and res.model.params.n_actions == 2


def test_ensemble_delegation_soundness_in_training_log():
    kernel = SubPolicy(lambda obs: np.where(obs[:, 0] > 0, 2, 0))
    deep = SubPolicy(lambda obs: np.where(obs[:, 1] > 0, 1, 0))
    trace = EnsembleTrace()
    seen = []
    fac = lambda: _RecordingEnv(seen, lambda o, a: float(a == 1))
    train_ensemble(fac, kernel, deep, [0, 1], PpoConfig(iterations=3, **TOY_CFG), trace=trace)
    assert len(trace.rows) == len(seen) and trace.rows
    for row, obs in zip(trace.rows, seen):
        for k, f in enumerate(row["ids"]):
            x = obs[f][None, :]
            sub = kernel if row["master"][k] == 0 else deep
            assert row["executed"][k] == int(sub(x)[0])


class _RecordingEnv(ToyEnv):
    """Logs the compact observation of every agent before each step."""

    def __init__(self, sink, reward_fn):
        super().__init__(reward_fn, n_agents=3, horizon=5)
        self.sink = sink

    def step(self, joint, compute_obs=True):
        self.sink.append({f: self.obs[f].compact.copy() for f in joint})
        return super().step(joint, compute_obs)


def test_ensemble_identical_subpolicies_match_subpolicy_reward():
    reward = lambda o, a: float(o[0] if a == 2 else -o[0])
    fac = lambda: ToyEnv(reward, n_agents=4, horizon=10)
    sub = SubPolicy(lambda obs: np.where(obs[:, 1] > 0, 2, 1))
    diffs = []
    for seed in range(10):
        scenarios = list(range(seed * 10, seed * 10 + 5))
        res = train_ensemble(fac, sub, sub, scenarios, PpoConfig(iterations=5, seed=seed, **TOY_CFG))
        direct = evaluate(lambda env, r: dict(zip(r.acting(), sub(np.array(
            [r.observations()[f].compact for f in r.acting()])).tolist())), scenarios, fac)
        diffs.extend(row["mean_reward"] - direct.scenarios[row["scenario"]].mean_reward for row in res.curve)
    diffs = np.array(diffs)
    assert np.allclose(diffs, 0.0, atol=1e-12)


def _kernel_model(layout, dim=16):
    return KernelModel(np.zeros((2, dim)), np.zeros((2, 3)), 1.0, np.zeros(dim), np.ones(dim), layout)


def _ppo_model(layout, dim=34, kind="ppo", n_actions=3):
    return PolicyModel(MlpParams.init(dim, n_actions, (8, 8)), RunningNormalizer(dim), layout, "extended", kind)


def test_ensemble_layout_mismatch():
    with pytest.raises(FeatureLayoutMismatch):
        train_ensemble(AtcEnv, _kernel_model("atc-obs-v1:N=5"), _ppo_model("atc-obs-v1:N=4"),
                       [_parallel_scenario(2, 10)], PpoConfig(iterations=1, hidden=(8, 8)))


def test_ensemble_policy_and_artifact_roundtrip(tmp_path):
    layout = AtcEnv().layout
    kernel, ppo = _kernel_model(layout), _ppo_model(layout)
    master = PolicyModel(MlpParams.init(16, 2, (8, 8), seed=4), RunningNormalizer(16), layout, "compact", "ensemble")
    save_ensemble(tmp_path / "e.json", master, kernel, ppo)
    m2, k2, p2 = load_ensemble(tmp_path / "e.json")
    sc = _parallel_scenario(3, 20)
    pol_a = EnsemblePolicy(master, kernel, ppo, record=True)
    pol_b = EnsemblePolicy(m2, k2, p2)
    assert evaluate(pol_a, [sc], AtcEnv).to_dict() == evaluate(pol_b, [sc], AtcEnv).to_dict()
    assert pol_a.trace and all(set(r["master"]) <= {0, 1} for r in pol_a.trace)


# -- evaluation --------------------------------------------------------------------------

def test_evaluate_report_properties():
    scs = [_parallel_scenario(3, 30), _parallel_scenario(4, 30)]
    a = evaluate(LocalSearchPolicy(), scs, AtcEnv)
    b = evaluate(LocalSearchPolicy(), scs, AtcEnv)
    assert a.to_dict() == b.to_dict()
    assert abs(sum(a.action_distribution) - 1.0) < 1e-9
    means = [s.mean_reward for s in a.scenarios]
    assert a.mean_reward == pytest.approx(np.mean(means))
    assert a.stderr == pytest.approx(np.std(means, ddof=1) / math.sqrt(2))
    base = evaluate(BaselinePolicy(), scs, AtcEnv)
    c = evaluate(LocalSearchPolicy(), scs, AtcEnv, baseline=base)
    assert c.gain == (c.mean_reward - base.mean_reward) / abs(base.mean_reward) or base.mean_reward == 0


def test_gain_definition():
    assert gain(-90.0, -100.0) == pytest.approx(0.1)
    assert gain(110.0, 100.0) == pytest.approx(0.1)
    assert gain(0.0, 0.0) == 0.0

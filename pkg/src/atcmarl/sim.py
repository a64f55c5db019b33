"""Multi-aircraft en-route simulator with speed-change actions.

Time advances in fixed steps of ``Scenario.step_seconds``. Every active
aircraft flies its waypoint sequence along great-circle segments; each step
it may slow down, hold, or speed up by ``delta_speed``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from typing import Iterable, Mapping

import numpy as np

from . import geo
from .errors import EmptyScenario, MissingAction, UnknownAgent
from .geo import GeoPoint
from .scenario import FlightPlan, Scenario

LAYOUT_VERSION = "atc-obs-v1"
N_LOCAL = 6
N_GRID = 18


class Action(IntEnum):
    DECREASE = 0
    HOLD = 1
    INCREASE = 2

    @property
    def delta(self) -> int:
        return int(self) - 1


N_ACTIONS = len(Action)

FUEL_PRESETS = {"high": -0.3, "medium": -0.1, "low": -0.02}


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = -1000.0  # per-step conflict penalty
    beta: float = -100.0  # per-step congestion penalty
    gamma: float = -1.0  # per km behind schedule
    delta: float = FUEL_PRESETS["medium"]  # per (m/s)^2 of deviation from optimal speed
    R_s: float = 10.0
    R_c: float = 300.0
    R_nbr: float = 1000.0
    N_c: int = 3
    delta_speed: float = 10.0
    v_min_factor: float = 0.7
    v_max_factor: float = 1.2

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            if getattr(self, name) > 0:
                raise ValueError(f"penalty weight {name} must be <= 0")
        if not (0 < self.R_s and 0 < self.R_c and 0 < self.R_nbr):
            raise ValueError("radii must be positive")
        if not 0 < self.v_min_factor <= 1.0 <= self.v_max_factor:
            raise ValueError("speed envelope must bracket the optimal speed")

    @classmethod
    def preset(cls, fuel: str = "medium", **overrides) -> "RewardWeights":
        if fuel not in FUEL_PRESETS:
            raise ValueError(f"unknown fuel preset {fuel!r}; choose from {sorted(FUEL_PRESETS)}")
        return cls(delta=FUEL_PRESETS[fuel], **overrides)

    @classmethod
    def conflict_only(cls, **overrides) -> "RewardWeights":
        return cls(beta=0.0, gamma=0.0, delta=0.0, **overrides)


def feature_layout(n_neighbors: int) -> str:
    return f"{LAYOUT_VERSION}:N={n_neighbors}"


def compact_dim(n_neighbors: int) -> int:
    return N_LOCAL + 2 * n_neighbors


def extended_dim(n_neighbors: int) -> int:
    return compact_dim(n_neighbors) + N_GRID


@dataclass
class Observation:
    compact: np.ndarray
    extended: np.ndarray


@dataclass
class AgentStep:
    observation: Observation
    reward: float
    done: bool
    # (conflict, congestion, delay_km, fuel) raw terms before weighting
    terms: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)


@dataclass
class StepResult:
    step: int
    agents: dict[str, AgentStep]
    joined: dict[str, AgentStep]
    active_count: int
    conflict_pairs: int
    episode_done: bool

    def acting(self) -> list[str]:
        """Agents that must receive an action at the next step, sorted."""
        ids = [fid for fid, a in self.agents.items() if not a.done]
        ids.extend(self.joined)
        return sorted(ids)

    def observations(self) -> dict[str, Observation]:
        out = {fid: a.observation for fid, a in self.agents.items() if not a.done}
        out.update({fid: a.observation for fid, a in self.joined.items()})
        return out


PENDING, ACTIVE, LANDED = "pending", "active", "landed"


@dataclass
class AircraftState:
    flight_id: str
    position: GeoPoint
    speed: float
    heading: float
    seg_index: int
    dist_flown: float
    status: str
    pos_in_seg: float = 0.0  # km along the current segment


class _Route:
    """Static per-flight geometry, computed once per reset."""

    def __init__(self, plan: FlightPlan, reference: FlightPlan):
        self.plan = plan
        self.seg_len = plan.segment_lengths_km()
        self.total_len = float(sum(self.seg_len))
        self.v0 = plan.optimal_speed
        self.headings = [geo.bearing_deg(p.location, q.location) for p, q in zip(plan.points, plan.points[1:])]
        ref_len = reference.segment_lengths_km()
        self.ref_times = np.array([p.sched_time for p in reference.points])
        self.ref_cum = np.concatenate([[0.0], np.cumsum(ref_len)])

    def expected_km(self, t: float) -> float:
        return float(np.interp(t, self.ref_times, self.ref_cum))


@lru_cache(maxsize=65536)
def _cell_block(code: str) -> dict[str, int]:
    block = geo.neighbor_cells(code)
    return {c: 3 * i + j for i, row in enumerate(block) for j, c in enumerate(row) if c is not None}


class AtcEnv:
    """Stateful environment. One logical owner at a time."""

    def __init__(self, weights: RewardWeights | None = None, n_neighbors: int = 5,
                 coarse_precision: int = geo.COARSE_PRECISION, fine_precision: int = geo.FINE_PRECISION):
        self.weights = weights or RewardWeights()
        self.n_neighbors = n_neighbors
        self.coarse_precision = coarse_precision
        self.fine_precision = fine_precision
        self.scenario: Scenario | None = None
        self.routes: dict[str, _Route] = {}
        self.aircraft: dict[str, AircraftState] = {}
        self.step_index = 0
        self.just_landed: set[str] = set()
        self._cache: dict | None = None

    @property
    def layout(self) -> str:
        return feature_layout(self.n_neighbors)

    @property
    def time_s(self) -> float:
        return self.step_index * self.scenario.step_seconds

    # -- lifecycle -----------------------------------------------------------

    def reset(self, scenario: Scenario) -> StepResult:
        if not scenario.flights:
            raise EmptyScenario("scenario has no flights")
        self.scenario = scenario
        self.routes = {p.flight_id: _Route(p, scenario.reference_plan(p.flight_id)) for p in scenario.flights}
        self.aircraft = {}
        for plan in sorted(scenario.flights, key=lambda p: p.flight_id):
            first = plan.points[0]
            route = self.routes[plan.flight_id]
            self.aircraft[plan.flight_id] = AircraftState(
                plan.flight_id, first.location, self._clamp(plan.flight_id, first.seg_speed),
                route.headings[0], 0, 0.0, PENDING,
            )
        self.step_index = 0
        self.just_landed = set()
        self._cache = None
        joined = [fid for fid, ac in self.aircraft.items() if self.routes[fid].plan.departure_time <= 0]
        for fid in joined:
            self.aircraft[fid].status = ACTIVE
        self._cache = None
        obs = {fid: AgentStep(self.observe(fid), 0.0, False) for fid in joined}
        return StepResult(0, {}, obs, len(joined), self.count_conflicts(), self._episode_over())

    def active_ids(self) -> list[str]:
        return [fid for fid, ac in self.aircraft.items() if ac.status == ACTIVE]

    def _population(self) -> list[str]:
        return [fid for fid, ac in self.aircraft.items() if ac.status == ACTIVE or fid in self.just_landed]

    def _episode_over(self) -> bool:
        if self.step_index >= self.scenario.horizon_steps:
            return True
        return all(ac.status == LANDED for ac in self.aircraft.values())

    def _clamp(self, fid: str, v: float) -> float:
        v0 = self.routes[fid].v0
        w = self.weights
        return min(max(v, w.v_min_factor * v0), w.v_max_factor * v0)

    def speed_bounds(self, fid: str) -> tuple[float, float]:
        v0 = self.routes[fid].v0
        return self.weights.v_min_factor * v0, self.weights.v_max_factor * v0

    def scheduled_speed(self, fid: str) -> float:
        ac = self.aircraft[fid]
        pts = self.routes[fid].plan.points
        return pts[min(ac.seg_index, len(pts) - 2)].seg_speed

    def optimal_speed(self, fid: str) -> float:
        return self.routes[fid].v0

    def step(self, joint_action: Mapping[str, int | Action], compute_obs: bool = True) -> StepResult:
        if self.scenario is None:
            raise RuntimeError("reset() must be called before step()")
        if self._episode_over():
            raise RuntimeError("episode is over; call reset()")
        acting = self.active_ids()
        acting_set = set(acting)
        for fid in joint_action:
            if fid not in acting_set:
                raise UnknownAgent(fid)
        for fid in acting:
            if fid not in joint_action:
                raise MissingAction(fid)
        self.just_landed = set()
        self._cache = None
        dt = float(self.scenario.step_seconds)
        t0 = self.time_s
        t1 = t0 + dt
        for fid in acting:
            ac = self.aircraft[fid]
            act = Action(int(joint_action[fid]))
            ac.speed = self._clamp(fid, ac.speed + act.delta * self.weights.delta_speed)
            self._advance(ac, ac.speed * dt / 1000.0)
        joined = []
        for fid, ac in self.aircraft.items():
            if ac.status == PENDING and self.routes[fid].plan.departure_time <= t1:
                ac.status = ACTIVE
                joined.append(fid)
                lag = t1 - max(self.routes[fid].plan.departure_time, t0)
                self._advance(ac, ac.speed * lag / 1000.0)
        self.step_index += 1
        if self.step_index >= self.scenario.horizon_steps:
            for fid in acting + joined:
                ac = self.aircraft[fid]
                if ac.status == ACTIVE:
                    ac.status = LANDED
                    self.just_landed.add(fid)
        agents = {}
        for fid in acting:
            terms = self.reward_terms(fid)
            obs = self.observe(fid) if compute_obs else None
            agents[fid] = AgentStep(obs, self._weigh(terms), self.aircraft[fid].status == LANDED, terms)
        joined_steps = {}
        for fid in sorted(joined):
            if self.aircraft[fid].status == LANDED:
                # departed and finished inside one step (or at the horizon); nothing to decide
                continue
            joined_steps[fid] = AgentStep(self.observe(fid) if compute_obs else None, 0.0, False)
        return StepResult(self.step_index, agents, joined_steps, len(self.active_ids()),
                          self.count_conflicts(), self._episode_over())

    def _advance(self, ac: AircraftState, km: float) -> None:
        route = self.routes[ac.flight_id]
        pts = route.plan.points
        last_seg = len(route.seg_len) - 1
        while km > 0.0:
            left = route.seg_len[ac.seg_index] - ac.pos_in_seg
            if km >= left:
                km -= left
                ac.dist_flown += left
                if ac.seg_index == last_seg:
                    ac.pos_in_seg = route.seg_len[ac.seg_index]
                    ac.position = pts[-1].location
                    ac.status = LANDED
                    self.just_landed.add(ac.flight_id)
                    return
                ac.seg_index += 1
                ac.pos_in_seg = 0.0
            else:
                ac.pos_in_seg += km
                ac.dist_flown += km
                km = 0.0
        seg = ac.seg_index
        length = route.seg_len[seg]
        frac = ac.pos_in_seg / length if length > 0 else 1.0
        ac.position = geo.interpolate(pts[seg].location, pts[seg + 1].location, min(frac, 1.0))
        ac.heading = route.headings[seg]

    # -- snapshot for one-step lookahead --------------------------------------

    def snapshot(self) -> dict:
        return {
            "aircraft": copy.deepcopy(self.aircraft),
            "step_index": self.step_index,
            "just_landed": set(self.just_landed),
        }

    def restore(self, snap: dict) -> None:
        self.aircraft = copy.deepcopy(snap["aircraft"])
        self.step_index = snap["step_index"]
        self.just_landed = set(snap["just_landed"])
        self._cache = None

    def clone(self) -> "AtcEnv":
        other = AtcEnv(self.weights, self.n_neighbors, self.coarse_precision, self.fine_precision)
        other.scenario = self.scenario
        other.routes = self.routes
        other.restore(self.snapshot())
        return other

    def place(self, positions: Mapping[str, GeoPoint]) -> None:
        """Teleport aircraft and mark them active (diagnostics and tests only)."""
        for fid, pos in positions.items():
            if fid not in self.aircraft:
                raise UnknownAgent(fid)
            ac = self.aircraft[fid]
            ac.position = GeoPoint(*pos)
            ac.status = ACTIVE
        self._cache = None

    # -- geometry cache --------------------------------------------------------

    def _geometry(self) -> dict:
        if self._cache is not None:
            return self._cache
        ids = self._population()
        lats = np.array([self.aircraft[f].position.lat for f in ids])
        lons = np.array([self.aircraft[f].position.lon for f in ids])
        dist = geo.haversine_pairwise(lats, lons) if ids else np.zeros((0, 0))
        self._cache = {"ids": ids, "index": {f: i for i, f in enumerate(ids)}, "dist": dist}
        return self._cache

    def _require(self, fid: str) -> int:
        g = self._geometry()
        if fid not in g["index"]:
            raise UnknownAgent(fid)
        return g["index"][fid]

    def count_conflicts(self) -> int:
        g = self._geometry()
        keep = [i for i, f in enumerate(g["ids"]) if self.aircraft[f].status == ACTIVE]
        if len(keep) < 2:
            return 0
        d = g["dist"][np.ix_(keep, keep)]
        iu = np.triu_indices(len(d), k=1)
        return int(np.count_nonzero(d[iu] < self.weights.R_s))

    # -- observations and rewards ---------------------------------------------

    def expected_distance(self, fid: str, t_s: float | None = None) -> float:
        if fid not in self.routes:
            raise UnknownAgent(fid)
        return self.routes[fid].expected_km(self.time_s if t_s is None else t_s)

    def delay_km(self, fid: str) -> float:
        ac = self.aircraft[fid]
        return max(0.0, self.expected_distance(fid) - ac.dist_flown)

    def reward_terms(self, fid: str) -> tuple[float, float, float, float]:
        i = self._require(fid)
        d = self._geometry()["dist"][i]
        w = self.weights
        others = np.delete(d, i)
        conflict = 1.0 if others.size and others.min() < w.R_s else 0.0
        congestion = 1.0 if np.count_nonzero(others < w.R_c) > w.N_c else 0.0
        dev = self.aircraft[fid].speed - self.routes[fid].v0
        return conflict, congestion, self.delay_km(fid), dev * dev

    def _weigh(self, terms: tuple[float, float, float, float]) -> float:
        w = self.weights
        total = w.alpha * terms[0] + w.beta * terms[1] + w.gamma * terms[2] + w.delta * terms[3]
        return total + 0.0  # no negative zero

    def reward_of(self, fid: str) -> float:
        return self._weigh(self.reward_terms(fid))

    def observe(self, fid: str) -> Observation:
        i = self._require(fid)
        g = self._geometry()
        ids, dist = g["ids"], g["dist"]
        ac = self.aircraft[fid]
        route = self.routes[fid]
        w = self.weights
        local = [
            ac.position.lat,
            ac.position.lon,
            ac.speed,
            ac.heading,
            max(0.0, route.total_len - ac.dist_flown),
            self.delay_km(fid),
        ]
        cand = [(dist[i, j], ids[j], j) for j in range(len(ids)) if j != i and dist[i, j] <= w.R_nbr]
        cand.sort()
        slots = []
        for dij, other, _ in cand[: self.n_neighbors]:
            slots.extend((float(dij), self._closing_speed(ac, self.aircraft[other])))
        while len(slots) < 2 * self.n_neighbors:
            slots.extend((w.R_nbr, 0.0))
        compact = np.array(local + slots, dtype=float)
        grids = self._grid_features(fid, ids)
        return Observation(compact, np.concatenate([compact, grids]))

    def _closing_speed(self, a: AircraftState, b: AircraftState) -> float:
        """Rate at which the great-circle distance between a and b shrinks (m/s)."""
        va = 0.0 if a.status == LANDED else a.speed
        vb = 0.0 if b.status == LANDED else b.speed
        if a.position[:2] == b.position[:2]:
            return 0.0
        b_ab = geo.bearing_deg(a.position, b.position)
        b_ba = geo.bearing_deg(b.position, a.position)
        return (va * math.cos(math.radians(a.heading - b_ab))
                + vb * math.cos(math.radians(b.heading - b_ba)))

    def _codes(self, precision: int) -> dict[str, str]:
        key = f"codes{precision}"
        g = self._geometry()
        if key not in g:
            g[key] = {f: geo.geohash(self.aircraft[f].position, precision) for f in g["ids"]}
        return g[key]

    def _grid_features(self, fid: str, ids: list[str]) -> np.ndarray:
        out = np.zeros(N_GRID)
        for k, precision in enumerate((self.coarse_precision, self.fine_precision)):
            codes = self._codes(precision)
            block = _cell_block(codes[fid])
            for other in ids:
                if other == fid:
                    continue
                slot = block.get(codes[other])
                if slot is not None:
                    out[9 * k + slot] += 1.0
        return out


def run_episode(env: AtcEnv, scenario: Scenario, policy, max_steps: int | None = None) -> list[StepResult]:
    """Drive ``env`` through one episode with ``policy(env, result) -> {fid: action}``."""
    result = env.reset(scenario)
    trace = [result]
    while not result.episode_done:
        if max_steps is not None and len(trace) > max_steps:
            break
        result = env.step(policy(env, result))
        trace.append(result)
    return trace

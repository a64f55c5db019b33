"""Flight plans, schedule files, synthetic schedules and delay perturbation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvariantError, ParseError
from .geo import GeoPoint, haversine_km, interpolate

DEFAULT_HORIZON_STEPS = 360
DEFAULT_STEP_SECONDS = 240

SPEED_RANGE_MPS = (180.0, 280.0)
# synthetic schedule times are multiples of this (exact in binary floating point)
_TIME_QUANTUM_S = 1.0 / 16.0


@dataclass(frozen=True)
class NavPoint:
    location: GeoPoint
    sched_time: float
    seg_speed: float


@dataclass(frozen=True)
class FlightPlan:
    flight_id: str
    points: tuple[NavPoint, ...]

    @property
    def departure_time(self) -> float:
        return self.points[0].sched_time

    @property
    def arrival_time(self) -> float:
        return self.points[-1].sched_time

    @property
    def optimal_speed(self) -> float:
        """Fuel-optimal cruise speed: time-weighted mean of the segment speeds."""
        pts = self.points
        total = pts[-1].sched_time - pts[0].sched_time
        acc = sum(p.seg_speed * (q.sched_time - p.sched_time) for p, q in zip(pts, pts[1:]))
        return acc / total

    def segment_lengths_km(self) -> list[float]:
        return [haversine_km(p.location, q.location) for p, q in zip(self.points, self.points[1:])]

    def validate(self) -> None:
        if not self.flight_id:
            raise InvariantError("flight_id", "empty flight id")
        if len(self.points) < 2:
            raise InvariantError("points", f"{self.flight_id}: need at least 2 points")
        for i, (p, q) in enumerate(zip(self.points, self.points[1:])):
            if not q.sched_time > p.sched_time:
                raise InvariantError("sched_time", f"{self.flight_id}: not strictly increasing at point {i + 1}")
            if not p.seg_speed > 0:
                raise InvariantError("seg_speed", f"{self.flight_id}: non-positive speed at point {i}")
        for i, p in enumerate(self.points):
            lat, lon, alt = p.location
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                raise InvariantError("location", f"{self.flight_id}: point {i} out of range")
            if alt < 0:
                raise InvariantError("alt_m", f"{self.flight_id}: negative altitude at point {i}")
            if not all(math.isfinite(v) for v in (lat, lon, alt, p.sched_time, p.seg_speed)):
                raise InvariantError("points", f"{self.flight_id}: non-finite value at point {i}")


@dataclass
class Scenario:
    """A set of flights to simulate.

    ``reference`` optionally holds the published (unperturbed) plans; when
    present, lateness is measured against it instead of ``flights``.
    """

    flights: list[FlightPlan]
    horizon_steps: int = DEFAULT_HORIZON_STEPS
    step_seconds: int = DEFAULT_STEP_SECONDS
    seed: int = 0
    reference: list[FlightPlan] | None = None

    def reference_plan(self, flight_id: str) -> FlightPlan:
        if self.reference is not None:
            for plan in self.reference:
                if plan.flight_id == flight_id:
                    return plan
        for plan in self.flights:
            if plan.flight_id == flight_id:
                return plan
        raise KeyError(flight_id)


def validate_plans(plans: Sequence[FlightPlan]) -> None:
    seen: set[str] = set()
    for plan in plans:
        plan.validate()
        if plan.flight_id in seen:
            raise InvariantError("flight_id", f"duplicate flight id {plan.flight_id!r}")
        seen.add(plan.flight_id)


# -- schedule files ----------------------------------------------------------

def plan_to_dict(plan: FlightPlan) -> dict:
    return {
        "flight_id": plan.flight_id,
        "points": [
            {
                "lat": p.location.lat,
                "lon": p.location.lon,
                "alt_m": p.location.alt,
                "sched_time_s": p.sched_time,
                "seg_speed_mps": p.seg_speed,
            }
            for p in plan.points
        ],
    }


def plan_from_dict(obj: dict) -> FlightPlan:
    if not isinstance(obj, dict):
        raise ParseError("flight entry must be an object")
    try:
        fid = obj["flight_id"]
        raw_points = obj["points"]
        points = tuple(
            NavPoint(
                GeoPoint(float(p["lat"]), float(p["lon"]), float(p["alt_m"])),
                float(p["sched_time_s"]),
                float(p["seg_speed_mps"]),
            )
            for p in raw_points
        )
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad flight entry: {exc}") from None
    if not isinstance(fid, str):
        raise ParseError("flight_id must be a string")
    return FlightPlan(fid, points)


def _locate(text: str, flight_index: int) -> int | None:
    """Best-effort line number of the n-th ``flight_id`` key in ``text``."""
    pos = -1
    for _ in range(flight_index + 1):
        pos = text.find('"flight_id"', pos + 1)
        if pos < 0:
            return None
    return text.count("\n", 0, pos) + 1


def parse_schedule(text: str) -> list[FlightPlan]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno) from None
    if not isinstance(doc, list):
        raise ParseError("schedule must be a JSON list of flights", 1)
    plans = []
    for i, entry in enumerate(doc):
        try:
            plans.append(plan_from_dict(entry))
        except ParseError as exc:
            raise ParseError(str(exc), _locate(text, i)) from None
    validate_plans(plans)
    return plans


def load_schedule(path: str | Path) -> list[FlightPlan]:
    return parse_schedule(Path(path).read_text(encoding="utf-8"))


def dump_schedule(plans: Iterable[FlightPlan]) -> str:
    return json.dumps([plan_to_dict(p) for p in plans], indent=1) + "\n"


def save_schedule(plans: Iterable[FlightPlan], path: str | Path) -> None:
    Path(path).write_text(dump_schedule(plans), encoding="utf-8")


def scenario_to_dict(sc: Scenario) -> dict:
    out = {
        "seed": sc.seed,
        "horizon_steps": sc.horizon_steps,
        "step_seconds": sc.step_seconds,
        "flights": [plan_to_dict(p) for p in sc.flights],
    }
    if sc.reference is not None:
        out["reference"] = [plan_to_dict(p) for p in sc.reference]
    return out


def scenario_from_dict(doc: dict) -> Scenario:
    if isinstance(doc, list):
        # a bare schedule file is a valid scenario with default clock
        flights = [plan_from_dict(e) for e in doc]
        validate_plans(flights)
        return Scenario(flights)
    try:
        flights = [plan_from_dict(e) for e in doc["flights"]]
        reference = [plan_from_dict(e) for e in doc["reference"]] if "reference" in doc else None
        sc = Scenario(
            flights,
            horizon_steps=int(doc.get("horizon_steps", DEFAULT_HORIZON_STEPS)),
            step_seconds=int(doc.get("step_seconds", DEFAULT_STEP_SECONDS)),
            seed=int(doc.get("seed", 0)),
            reference=reference,
        )
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}") from None
    validate_plans(sc.flights)
    if sc.reference is not None:
        validate_plans(sc.reference)
        if {p.flight_id for p in sc.reference} != {p.flight_id for p in sc.flights}:
            raise InvariantError("reference", "reference flight ids differ from flights")
    return sc


def load_scenario(path: str | Path) -> Scenario:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno) from None
    return scenario_from_dict(doc)


def save_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=1) + "\n", encoding="utf-8")


# -- synthetic schedules -----------------------------------------------------

def _quantize(t: float) -> float:
    return round(t / _TIME_QUANTUM_S) * _TIME_QUANTUM_S


def generate_synthetic(
    n_flights: int,
    region: tuple[float, float, float, float],
    seed: int,
    horizon_s: float = DEFAULT_HORIZON_STEPS * DEFAULT_STEP_SECONDS,
    cruise_alt_m: float = 10_000.0,
    cruise_speed: tuple[float, float] = SPEED_RANGE_MPS,
) -> list[FlightPlan]:
    """Random flight plans inside ``region`` = (lat_min, lat_max, lon_min, lon_max).

    Each flight flies 3-10 waypoints between a random origin and destination,
    with segment speeds jittered around a per-flight cruise speed drawn from
    ``cruise_speed`` (clipped to ``SPEED_RANGE_MPS``). Departures are spread so that flights can finish
    within ``horizon_s`` when their duration allows it.
    """
    if n_flights < 1:
        raise ValueError("n_flights must be >= 1")
    lat_min, lat_max, lon_min, lon_max = region
    if not (lat_max > lat_min and lon_max > lon_min):
        raise ValueError(f"degenerate region {region}")
    rng = np.random.default_rng(seed)
    diag = haversine_km(GeoPoint(lat_min, lon_min), GeoPoint(lat_max, lon_max))
    lo_speed, hi_speed = SPEED_RANGE_MPS
    plans = []
    for k in range(n_flights):
        while True:
            o = GeoPoint(rng.uniform(lat_min, lat_max), rng.uniform(lon_min, lon_max), cruise_alt_m)
            d = GeoPoint(rng.uniform(lat_min, lat_max), rng.uniform(lon_min, lon_max), cruise_alt_m)
            if haversine_km(o, d) >= 0.4 * diag:
                break
        n_pts = int(rng.integers(3, 11))
        fracs = np.sort(rng.uniform(0.05, 0.95, size=n_pts - 2))
        route_len = haversine_km(o, d)
        jitter = 0.05 * route_len / 111.0  # degrees, ~5% of the route length
        locs = [o]
        for f in fracs:
            mid = interpolate(o, d, float(f))
            locs.append(GeoPoint(
                float(np.clip(mid.lat + rng.uniform(-jitter, jitter), lat_min, lat_max)),
                float(np.clip(mid.lon + rng.uniform(-jitter, jitter), lon_min, lon_max)),
                cruise_alt_m,
            ))
        locs.append(d)
        cruise = rng.uniform(*cruise_speed)
        speeds = np.clip(cruise * (1.0 + rng.uniform(-0.03, 0.03, size=n_pts - 1)), lo_speed, hi_speed)
        durations = [haversine_km(a, b) * 1000.0 / s for a, b, s in zip(locs, locs[1:], speeds)]
        total = sum(durations)
        dep = _quantize(rng.uniform(0.0, max(0.0, horizon_s - total - 1.0)))
        # quantize each gap, nudging it one quantum when rounding would push
        # the re-derived speed outside the allowed band
        times = [dep]
        for a, b, dur in zip(locs, locs[1:], durations):
            meters = haversine_km(a, b) * 1000.0
            q = max(_quantize(dur), _TIME_QUANTUM_S)
            if meters / q > hi_speed:
                q += _TIME_QUANTUM_S
            elif meters / q < lo_speed and q > _TIME_QUANTUM_S:
                q -= _TIME_QUANTUM_S
            times.append(times[-1] + q)
        seg = [
            haversine_km(a, b) * 1000.0 / (t1 - t0)
            for a, b, t0, t1 in zip(locs, locs[1:], times, times[1:])
        ]
        seg.append(seg[-1])
        points = tuple(NavPoint(loc, t, float(s)) for loc, t, s in zip(locs, times, seg))
        plans.append(FlightPlan(f"F{seed}-{k:04d}", points))
    return plans


def perturb(plans: Sequence[FlightPlan], max_shift_min: float, seed: int) -> list[FlightPlan]:
    """Shift each plan rigidly in time by a uniform delay in [-max_shift, +max_shift] minutes.

    Shifts are whole seconds so intra-plan gaps survive the addition exactly
    for schedules on a binary time grid.
    """
    if max_shift_min < 0:
        raise ValueError("max_shift_min must be >= 0")
    if max_shift_min == 0:
        return list(plans)
    rng = np.random.default_rng(seed)
    out = []
    for plan in plans:
        shift = float(round(rng.uniform(-max_shift_min, max_shift_min) * 60.0))
        pts = tuple(replace(p, sched_time=p.sched_time + shift) for p in plan.points)
        out.append(FlightPlan(plan.flight_id, pts))
    return out


def scenario_seed(base_seed: int, split: str, index: int) -> int:
    """Perturbation seed of scenario ``index`` in ``split``; train and test never collide."""
    offset = {"train": 0, "test": 1, "val": 2}[split]
    return (base_seed * 3 + offset) * 1_000_003 + index


def scenario_set(base: Sequence[FlightPlan], count: int, max_shift_min: float, seed: int, split: str = "train",
                 horizon_steps: int = DEFAULT_HORIZON_STEPS,
                 step_seconds: int = DEFAULT_STEP_SECONDS) -> list[Scenario]:
    """Perturbed copies of ``base``; lateness is measured against ``base``."""
    out = []
    for k in range(count):
        s = scenario_seed(seed, split, k)
        out.append(Scenario(perturb(base, max_shift_min, s), horizon_steps, step_seconds, seed=s,
                            reference=list(base)))
    return out


def region_around(center: GeoPoint, half_span_deg: float) -> tuple[float, float, float, float]:
    return (center.lat - half_span_deg, center.lat + half_span_deg,
            center.lon - half_span_deg, center.lon + half_span_deg)


DEFAULT_REGION = (38.0, 46.0, 0.0, 12.0)  # southern Europe

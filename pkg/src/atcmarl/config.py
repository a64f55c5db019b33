"""Run configuration: documented defaults, TOML files, command-line overrides.

Precedence is flags > file > defaults. Every field becomes a ``--flag`` whose
help text shows the default.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import typing
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .kbsf import DEFAULT_WIDTHS
from .scenario import DEFAULT_REGION, SPEED_RANGE_MPS
from .sim import FUEL_PRESETS, AtcEnv, RewardWeights
from .train import KbsfConfig, PpoConfig


@dataclass
class RunConfig:
    # reward
    fuel: str = "medium"
    alpha: float = -1000.0
    beta: float = -100.0
    gamma_delay: float = -1.0
    delta_fuel: float | None = None  # None: take the fuel preset's value
    R_s: float = 10.0
    R_c: float = 300.0
    R_nbr: float = 1000.0
    N_c: int = 3
    # kinematics and observation
    delta_speed: float = 10.0
    v_min_factor: float = 0.7
    v_max_factor: float = 1.2
    n_neighbors: int = 5
    # scenarios
    horizon_steps: int = 360
    step_seconds: int = 240
    n_flights: int = 40
    region: tuple[float, float, float, float] = DEFAULT_REGION
    cruise_speed: tuple[float, float] = SPEED_RANGE_MPS
    max_shift_min: float = 30.0
    n_train: int = 1000
    n_test: int = 30
    # learners
    discount: float = 0.99
    lr: float = 0.0005
    clip_eps: float = 0.3
    minibatch: int = 128
    updates_per_iter: int = 8
    iterations: int = 300
    ensemble_iterations: int | None = None  # None: half of iterations
    hidden: tuple[int, int] = (256, 256)
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    momentum: float = 0.0
    normalize_returns: bool = True
    kbsf_n: int = 50_000
    kbsf_m: int = 200
    widths: tuple[float, ...] = DEFAULT_WIDTHS
    validation_fraction: float = 0.2
    # evaluation
    stochastic_eval: bool = False
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.fuel not in FUEL_PRESETS:
            raise ConfigError(f"fuel must be one of {sorted(FUEL_PRESETS)}, got {self.fuel!r}")
        if not 0.0 <= self.discount < 1.0:
            raise ConfigError("discount must lie in [0, 1)")
        for name in ("horizon_steps", "n_flights", "minibatch", "updates_per_iter", "kbsf_n", "kbsf_m",
                     "n_neighbors"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.iterations < 0 or self.n_train < 0 or self.n_test < 0:
            raise ConfigError("counts must be non-negative")
        if not self.widths or min(self.widths) <= 0:
            raise ConfigError("widths must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        try:
            self.weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def weights(self) -> RewardWeights:
        delta = FUEL_PRESETS[self.fuel] if self.delta_fuel is None else self.delta_fuel
        return RewardWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma_delay, delta=delta,
                             R_s=self.R_s, R_c=self.R_c, R_nbr=self.R_nbr, N_c=self.N_c,
                             delta_speed=self.delta_speed, v_min_factor=self.v_min_factor,
                             v_max_factor=self.v_max_factor)

    def env_factory(self):
        weights, n = self.weights(), self.n_neighbors
        return lambda: AtcEnv(weights, n_neighbors=n)

    def ppo(self, ensemble: bool = False) -> PpoConfig:
        iters = self.iterations
        if ensemble:
            iters = self.ensemble_iterations if self.ensemble_iterations is not None else max(1, iters // 2)
        return PpoConfig(iterations=iters, gamma=self.discount, lr=self.lr, clip_eps=self.clip_eps,
                         minibatch=self.minibatch, updates_per_iter=self.updates_per_iter,
                         hidden=tuple(self.hidden), value_coef=self.value_coef,
                         entropy_coef=self.entropy_coef, max_grad_norm=self.max_grad_norm,
                         momentum=self.momentum, normalize_returns=self.normalize_returns,
                         obs_variant="compact" if ensemble else "extended", seed=self.seed)

    def kbsf(self) -> KbsfConfig:
        return KbsfConfig(n=self.kbsf_n, m=self.kbsf_m, gamma=self.discount, widths=tuple(self.widths),
                          seed=self.seed)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def echo(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


_HINTS = typing.get_type_hints(RunConfig)


def _coerce(name: str, value):
    """Convert a TOML or command-line value to the field's declared type."""
    hint = _HINTS[name]
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or type(None) in args:  # Optional[X]
        if value is None or (isinstance(value, str) and value.lower() in ("none", "")):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if origin is tuple:
            items = value.split(",") if isinstance(value, str) else list(value)
            elem = args[0]
            out = tuple(elem(float(x)) if elem is int else elem(x) for x in items)
            if args[-1] is not Ellipsis and len(out) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return out
        if hint is bool:
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("1", "true", "yes", "on"):
                return True
            if str(value).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        return hint(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from exc


def _flatten(doc: dict) -> dict:
    """Accept flat files or files grouped into tables such as [reward] and [ppo]."""
    flat = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            flat.update(_flatten(value))
        else:
            flat[key] = value
    return flat


def load_file(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    flat = _flatten(doc)
    unknown = sorted(set(flat) - set(_HINTS))
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
    return {k: _coerce(k, v) for k, v in flat.items()}


def build(file: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    values = load_file(file) if file else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = _coerce(key, value)
    return RunConfig(**values).validate()


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


_ALIASES = {"kbsf_n": ("--n",), "kbsf_m": ("--m",)}


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per RunConfig field; unset flags stay None so the file wins."""
    group = parser.add_argument_group("configuration (flags > --config file > defaults)")
    group.add_argument("--config", default=None, help="TOML config file")
    for f in fields(RunConfig):
        default = f.default
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        group.add_argument(_flag(f.name), *_ALIASES.get(f.name, ()), dest=f"cfg_{f.name}", default=None,
                           metavar="V", help=f"(default: {shown})")


def from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: getattr(args, f"cfg_{f.name}", None) for f in fields(RunConfig)}
    return build(getattr(args, "config", None), overrides)

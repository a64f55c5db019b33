"""Command-line entry point: gen, train {kbsf,ppo,ensemble}, eval, serve, client-demo."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import wire
from .errors import AtcError, ConfigError, MissingPrerequisite
from .kbsf import KernelModel
from .policy_net import PolicyModel
from .scenario import (
    Scenario, generate_synthetic, load_schedule, load_scenario, save_schedule, save_scenario, scenario_seed,
    scenario_set,
)
from .sim import Action
from .train import (
    BaselinePolicy, EnsemblePolicy, KernelPolicy, LocalSearchPolicy, PpoPolicy, evaluate, gain,
    load_ensemble, save_ensemble, train_ensemble, train_kbsf, train_marl, write_curve,
)

log = logging.getLogger("atcmarl")

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_RUNTIME = 0, 2, 3, 4
POLICIES = ("baseline", "local-search", "kernel", "ppo", "ensemble")


# -- scenario directories ------------------------------------------------------------

def _scenario_files(root: Path, split: str) -> list[Path]:
    d = root / split
    if not d.is_dir():
        raise MissingPrerequisite(f"scenario directory {d}")
    files = sorted(d.glob("*.json"))
    if not files:
        raise MissingPrerequisite(f"scenarios in {d}")
    return files


def load_split(root: str | Path, split: str) -> list[Scenario]:
    return [load_scenario(p) for p in _scenario_files(Path(root), split)]


def _train_val(cfg: cfgmod.RunConfig, root: Path) -> tuple[list[Scenario], list[Scenario]]:
    scenarios = load_split(root, "train")
    if len(scenarios) < 2:
        return scenarios, scenarios
    n_val = max(1, int(round(cfg.validation_fraction * len(scenarios))))
    return scenarios[:-n_val], scenarios[-n_val:]


# -- commands --------------------------------------------------------------------------

def cmd_gen(args, cfg: cfgmod.RunConfig) -> int:
    out = Path(args.out)
    n_train = cfg.n_train if args.train is None else args.train
    n_test = cfg.n_test if args.test is None else args.test
    if args.base:
        base = load_schedule(args.base)
    else:
        base = generate_synthetic(cfg.n_flights, cfg.region, cfg.seed,
                                  horizon_s=cfg.horizon_steps * cfg.step_seconds, cruise_speed=cfg.cruise_speed)
    out.mkdir(parents=True, exist_ok=True)
    save_schedule(base, out / "base.json")
    manifest = {"seed": cfg.seed, "base": "base.json", "max_shift_min": cfg.max_shift_min,
                "horizon_steps": cfg.horizon_steps, "step_seconds": cfg.step_seconds, "splits": {}}
    for split, count in (("train", n_train), ("test", n_test)):
        d = out / split
        d.mkdir(exist_ok=True)
        for stale in d.glob("*.json"):
            stale.unlink()
        scenarios = scenario_set(base, count, cfg.max_shift_min, cfg.seed, split, cfg.horizon_steps,
                                 cfg.step_seconds)
        for k, sc in enumerate(scenarios):
            save_scenario(sc, d / f"{k:05d}.json")
        manifest["splits"][split] = [{"file": f"{split}/{k:05d}.json", "seed": scenario_seed(cfg.seed, split, k)}
                                     for k in range(count)]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {n_train} train and {n_test} test scenarios to {out}")
    return EXIT_OK


def _curve_path(args, model_path: Path) -> Path:
    return Path(args.curve) if args.curve else model_path.with_suffix(".curve.jsonl")


def cmd_train(args, cfg: cfgmod.RunConfig) -> int:
    root = Path(args.scenarios)
    out = Path(args.out)
    factory = cfg.env_factory()
    if args.learner == "ensemble":
        # check prerequisites before touching scenarios
        for what, p in (("kernel model", args.kernel), ("ppo model", args.ppo)):
            if not p or not Path(p).is_file():
                raise MissingPrerequisite(what)
    train_set, val_set = _train_val(cfg, root)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.learner == "kbsf":
        model, sweep = train_kbsf(factory, train_set, val_set, cfg.kbsf())
        model.save(out)
        write_curve([{"tau": t, "validation_reward": s} for t, s in sweep], _curve_path(args, out))
        print(f"kbsf: tau={model.tau} written to {out}")
    elif args.learner == "ppo":
        result = train_marl(factory, train_set + val_set, cfg.ppo())
        result.model.save(out)
        write_curve(result.curve, _curve_path(args, out))
        print(f"ppo: {len(result.curve)} iterations written to {out}")
    else:
        kernel = KernelModel.load(args.kernel)
        ppo = PolicyModel.load(args.ppo)
        result = train_ensemble(factory, kernel, ppo, train_set + val_set, cfg.ppo(ensemble=True))
        save_ensemble(out, result.model, kernel, ppo)
        write_curve(result.curve, _curve_path(args, out))
        print(f"ensemble: {len(result.curve)} iterations written to {out}")
    return EXIT_OK


def _build_policy(name: str, args, cfg: cfgmod.RunConfig):
    greedy = not cfg.stochastic_eval
    if name == "baseline":
        return BaselinePolicy()
    if name == "local-search":
        return LocalSearchPolicy()
    if name == "kernel":
        if not args.kernel or not Path(args.kernel).is_file():
            raise MissingPrerequisite("kernel model")
        return KernelPolicy(KernelModel.load(args.kernel))
    if name == "ppo":
        if not args.ppo or not Path(args.ppo).is_file():
            raise MissingPrerequisite("ppo model")
        return PpoPolicy(PolicyModel.load(args.ppo), greedy=greedy, seed=cfg.seed)
    if not args.ensemble or not Path(args.ensemble).is_file():
        raise MissingPrerequisite("ensemble model")
    master, kernel, ppo = load_ensemble(args.ensemble)
    return EnsemblePolicy(master, kernel, ppo, greedy=greedy, seed=cfg.seed)


def _available(args) -> list[str]:
    names = ["baseline", "local-search"]
    for name, p in (("kernel", args.kernel), ("ppo", args.ppo), ("ensemble", args.ensemble)):
        if p and Path(p).is_file():
            names.append(name)
    return names


def cmd_eval(args, cfg: cfgmod.RunConfig) -> int:
    scenarios = load_split(args.scenarios, args.split)
    names = _available(args) if args.policy == "all" else [args.policy]
    factory = cfg.env_factory()
    baseline = evaluate(BaselinePolicy(), scenarios, factory, name="baseline")
    reports = []
    for name in names:
        rep = baseline if name == "baseline" else evaluate(_build_policy(name, args, cfg), scenarios, factory,
                                                           name=name)
        rep.gain = gain(rep.mean_reward, baseline.mean_reward)
        reports.append(rep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"fuel": cfg.fuel, "n_scenarios": len(scenarios), "baseline_mean_reward": baseline.mean_reward,
           "baseline_scenario_rewards": [s.mean_reward for s in baseline.scenarios],
           "reports": [r.to_dict() for r in reports]}
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "reward_bars.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "fuel", "mean_reward", "stderr", "gain"])
        for r in reports:
            w.writerow([r.policy, cfg.fuel, repr(r.mean_reward), repr(r.stderr), repr(r.gain)])
    with open(out / "action_distribution.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "fuel"] + [a.name.lower() for a in Action])
        for r in reports:
            w.writerow([r.policy, cfg.fuel] + [repr(x) for x in r.action_distribution])
    for r in reports:
        dist = " ".join(f"{x:.3f}" for x in r.action_distribution)
        print(f"{r.policy:13s} reward {r.mean_reward:12.3f} +- {r.stderr:8.3f}  gain {r.gain:+.4f}  actions {dist}")
    return EXIT_OK


def _serve_scenarios(args, cfg: cfgmod.RunConfig) -> list[Scenario]:
    if args.scenario:
        return [load_scenario(args.scenario)]
    if args.scenarios:
        return load_split(args.scenarios, args.split)
    base = generate_synthetic(cfg.n_flights, cfg.region, cfg.seed,
                              horizon_s=cfg.horizon_steps * cfg.step_seconds, cruise_speed=cfg.cruise_speed)
    return scenario_set(base, 1, cfg.max_shift_min, cfg.seed, "test", cfg.horizon_steps, cfg.step_seconds)


def cmd_serve(args, cfg: cfgmod.RunConfig) -> int:
    scenarios = _serve_scenarios(args, cfg)
    try:
        server = wire.make_server(cfg.env_factory(), args.listen, scenarios)
    except OSError as exc:
        print(f"error: cannot listen on {args.listen}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"serving {len(scenarios)} scenario(s) on {server.endpoint}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def run_client_episode(endpoint: str, index: int = 0, timeout: float = wire.DEFAULT_TIMEOUT,
                       seed: int = 0, policy: str = "hold") -> dict:
    """Drive one episode from outside the simulator process; returns EpisodeEnd metrics."""
    rng = np.random.default_rng(seed)
    with wire.WireClient(endpoint, timeout) as client:
        client.hello()
        msg = client.reset(index)
        steps = 0
        while msg.kind == "StateBatch":
            ids = wire.acting_ids(msg)
            if policy == "random":
                acts = {f: int(a) for f, a in zip(ids, rng.integers(0, 3, len(ids)))}
            else:
                acts = {f: int(Action.HOLD) for f in ids}
            msg = wire.client_step(client, acts)
            steps += 1
        client.goodbye()
    return msg.payload["metrics"]


def cmd_client_demo(args, cfg: cfgmod.RunConfig) -> int:
    if args.connect:
        metrics = run_client_episode(args.connect, args.index, args.timeout, cfg.seed, args.actions)
    else:
        # self-contained demo: in-process server on an ephemeral port
        server, _ = wire.serve_in_thread(cfg.env_factory(), "127.0.0.1:0", _serve_scenarios(args, cfg))
        try:
            metrics = run_client_episode(server.endpoint, args.index, args.timeout, cfg.seed, args.actions)
        finally:
            server.shutdown()
            server.server_close()
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atcmarl", description="Air traffic speed control with ensemble MARL.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write train/test scenario directories")
    g.add_argument("--out", default="scenarios")
    g.add_argument("--train", type=int, default=None, help="number of training scenarios (default: n_train)")
    g.add_argument("--test", type=int, default=None, help="number of test scenarios (default: n_test)")
    g.add_argument("--base", default=None, help="base schedule JSON (default: synthetic)")
    cfgmod.add_config_flags(g)

    t = sub.add_parser("train", help="train a learner")
    t.add_argument("learner", choices=("kbsf", "ppo", "ensemble"))
    t.add_argument("--scenarios", default="scenarios")
    t.add_argument("--out", required=True, help="model artifact path")
    t.add_argument("--curve", default=None, help="training curve JSONL (default: next to the model)")
    t.add_argument("--kernel", default=None, help="kernel model (ensemble only)")
    t.add_argument("--ppo", default=None, help="deep policy model (ensemble only)")
    cfgmod.add_config_flags(t)

    e = sub.add_parser("eval", help="evaluate policies on test scenarios")
    e.add_argument("--policy", default="all", choices=POLICIES + ("all",))
    e.add_argument("--scenarios", default="scenarios")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--kernel", default=None)
    e.add_argument("--ppo", default=None)
    e.add_argument("--ensemble", default=None)
    e.add_argument("--out", default="eval")
    cfgmod.add_config_flags(e)

    s = sub.add_parser("serve", help="serve the simulator over the wire protocol")
    s.add_argument("--listen", default="127.0.0.1:5555", help="host:port")
    s.add_argument("--scenario", default=None, help="single scenario file")
    s.add_argument("--scenarios", default=None, help="scenario directory")
    s.add_argument("--split", default="test", choices=("train", "test"))
    cfgmod.add_config_flags(s)

    c = sub.add_parser("client-demo", help="drive one episode as an external client")
    c.add_argument("--connect", default=None, help="host:port (default: start a private server)")
    c.add_argument("--index", type=int, default=0, help="scenario index on the server")
    c.add_argument("--actions", default="hold", choices=("hold", "random"))
    c.add_argument("--timeout", type=float, default=wire.DEFAULT_TIMEOUT)
    c.add_argument("--scenario", default=None)
    c.add_argument("--scenarios", default=None)
    c.add_argument("--split", default="test", choices=("train", "test"))
    cfgmod.add_config_flags(c)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "serve": cmd_serve,
            "client-demo": cmd_client_demo}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"config {cfg.echo()}", file=sys.stderr)
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (AtcError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

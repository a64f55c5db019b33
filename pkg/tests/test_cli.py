import filecmp
import json
import socket
import subprocess
import sys

import numpy as np
import pytest

from atcmarl import cli
from atcmarl.config import RunConfig
from atcmarl.kbsf import KernelModel
from atcmarl.scenario import load_scenario, load_schedule

SMALL = ["--n-flights", "6", "--horizon-steps", "30", "--seed", "7"]


def _gen(out, *extra):
    return cli.main(["gen", "--out", str(out), "--train", "6", "--test", "2", *SMALL, *extra])


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_same_tree(a / d, b / d) for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def scenarios(tmp_path_factory):
    out = tmp_path_factory.mktemp("sc")
    assert _gen(out) == 0
    return out


def test_help_lists_every_config_field(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "ppo", "--help"])
    text = capsys.readouterr().out
    for name, value in RunConfig().to_dict().items():
        assert "--" + name.replace("_", "-") in text
    assert "(default: 0.99)" in text and "(default: 0.0005)" in text and "(default: 128)" in text


def test_gen_layout_and_determinism(scenarios, tmp_path):
    manifest = json.loads((scenarios / "manifest.json").read_text())
    assert len(manifest["splits"]["train"]) == 6 and len(manifest["splits"]["test"]) == 2
    assert len(list((scenarios / "train").glob("*.json"))) == 6
    assert _gen(tmp_path) == 0
    assert _same_tree(scenarios, tmp_path)


def test_gen_defaults_are_1000_and_30():
    args = cli.build_parser().parse_args(["gen"])
    cfg = RunConfig()
    assert (args.train, args.test) == (None, None) and (cfg.n_train, cfg.n_test) == (1000, 30)


def test_gen_zero_shift_reproduces_base(tmp_path):
    assert _gen(tmp_path, "--max-shift-min", "0") == 0
    base = load_schedule(tmp_path / "base.json")
    for f in sorted((tmp_path / "train").glob("*.json")) + sorted((tmp_path / "test").glob("*.json")):
        assert load_scenario(f).flights == base


def test_config_error_exit_code(tmp_path):
    assert cli.main(["gen", "--out", str(tmp_path), "--fuel", "bogus"]) == 2
    bad = tmp_path / "c.toml"
    bad.write_text("nonsense = 1\n")
    assert cli.main(["gen", "--out", str(tmp_path), "--config", str(bad)]) == 2


def test_ensemble_without_kernel_is_missing_prerequisite(scenarios, tmp_path, capsys):
    code = cli.main(["train", "ensemble", "--scenarios", str(scenarios), "--out", str(tmp_path / "e.json")])
    assert code == 3
    assert "missing prerequisite: kernel model" in capsys.readouterr().err


def test_missing_scenarios_exit_code(tmp_path):
    assert cli.main(["train", "ppo", "--scenarios", str(tmp_path / "none"), "--out", str(tmp_path / "p.json")]) == 3


def test_train_kbsf_artifact_and_determinism(scenarios, tmp_path):
    args = ["train", "kbsf", "--scenarios", str(scenarios), "--n", "600", "--m", "20", "--widths", "0.1,1,10",
            *SMALL]
    assert cli.main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.curve.jsonl").read_bytes() == (tmp_path / "b.curve.jsonl").read_bytes()
    model = KernelModel.load(tmp_path / "a.json")
    assert model.q_star.shape == (20, 3) and model.tau in (0.1, 1.0, 10.0)


def test_train_eval_pipeline(scenarios, tmp_path):
    common = ["--scenarios", str(scenarios), *SMALL, "--iterations", "3", "--hidden", "8,8"]
    k, p, e = tmp_path / "k.json", tmp_path / "p.json", tmp_path / "e.json"
    assert cli.main(["train", "kbsf", "--out", str(k), "--n", "400", "--m", "10", "--widths", "1", *common]) == 0
    assert cli.main(["train", "ppo", "--out", str(p), *common]) == 0
    assert cli.main(["train", "ensemble", "--out", str(e), "--kernel", str(k), "--ppo", str(p), *common]) == 0
    assert len((tmp_path / "e.curve.jsonl").read_text().splitlines()) == 1  # half of 3 iterations
    ev = ["eval", "--policy", "all", "--kernel", str(k), "--ppo", str(p), "--ensemble", str(e), *common]
    assert cli.main(ev + ["--out", str(tmp_path / "r1")]) == 0
    assert cli.main(ev + ["--out", str(tmp_path / "r2")]) == 0
    assert _same_tree(tmp_path / "r1", tmp_path / "r2")
    doc = json.loads((tmp_path / "r1" / "report.json").read_text())
    names = [r["policy"] for r in doc["reports"]]
    assert names == ["baseline", "local-search", "kernel", "ppo", "ensemble"]
    base = float(np.mean(doc["baseline_scenario_rewards"]))
    for r in doc["reports"]:
        mean = float(np.mean([s["mean_reward"] for s in r["scenarios"]]))
        assert abs(r["gain"] - (mean - base) / abs(base)) < 1e-9
        assert abs(sum(r["action_distribution"]) - 1) < 1e-9
    bars = (tmp_path / "r1" / "reward_bars.csv").read_text().splitlines()
    assert bars[0] == "policy,fuel,mean_reward,stderr,gain" and len(bars) == 6
    dist = (tmp_path / "r1" / "action_distribution.csv").read_text().splitlines()
    assert dist[0] == "policy,fuel,decrease,hold,increase" and len(dist) == 6


def test_eval_baseline_histogram(scenarios, tmp_path):
    assert cli.main(["eval", "--policy", "baseline", "--scenarios", str(scenarios), "--out", str(tmp_path),
                     *SMALL]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())["reports"][0]
    assert rep["policy"] == "baseline" and rep["gain"] == 0.0
    assert abs(sum(rep["action_distribution"]) - 1) < 1e-9


def test_client_demo_in_process(capsys, scenarios):
    assert cli.main(["client-demo", "--scenarios", str(scenarios), *SMALL]) == 0
    metrics = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert metrics["agents"] == 6 and metrics["steps"] >= 1


def _free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_serve_subprocess_with_scenario_and_client(scenarios):
    port = _free_port()
    scenario = scenarios / "test" / "00000.json"
    n_flights = len(load_scenario(scenario).flights)
    proc = subprocess.Popen([sys.executable, "-m", "atcmarl.cli", "serve", "--listen", f"127.0.0.1:{port}",
                             "--scenario", str(scenario)], stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                            text=True)
    try:
        assert "serving 1 scenario(s)" in proc.stdout.readline()
        metrics = cli.run_client_episode(f"127.0.0.1:{port}", timeout=10)
        assert metrics["agents"] == n_flights
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def test_serve_on_occupied_port(capsys):
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    blocker.listen(1)
    port = blocker.getsockname()[1]
    try:
        assert cli.main(["serve", "--listen", f"127.0.0.1:{port}", *SMALL]) == 4
        assert "cannot listen" in capsys.readouterr().err
    finally:
        blocker.close()

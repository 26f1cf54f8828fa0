import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
import yaml

from rlpomcp.agent import ConfigError, TrainConfig, train
from rlpomcp.cli import main
from rlpomcp.config import DEFAULTS, dump_config, load_config, parse_config
from rlpomcp.harness import (
    EpisodeLog,
    ExperimentMatrix,
    NoData,
    PolicySpec,
    cell_seeds,
    emit_outputs,
    read_table,
    run_episode,
    run_experiment,
    shaped_reward_check,
    write_plots,
)
from rlpomcp.nn import CheckpointError
from rlpomcp.pomcp import SolverParams

SMALL = TrainConfig(steps_per_worker=6, dims=(5, 5, 3), seed_samples=3, samples_per_edge=2)
NAIVE = PolicySpec.parse("naive", fixed=SolverParams(20, 0.9, 0.05, 4))
RANDOM = PolicySpec.parse("random")
SMALL_YAML = {"world.dims": [5, 5, 3], "world.budget_steps": 6, "world.seed_samples": 3,
              "world.samples_per_edge": 2, "pomcp.rollouts": 20, "pomcp.depth": 4, "harness.n_seeds": 3,
              "agent.n_workers": 2, "agent.n_updates": 1, "agent.warmup_episodes": 1}


def binom_tail(k, n):
    return sum(math.comb(n, i) for i in range(k, n + 1)) / 2**n


def one_episode(spec=NAIVE, seed=0, objective="ei"):
    ws, es = cell_seeds(seed, 0, 0)
    return run_episode(SMALL.make_world(ws), spec, SMALL.episode_config(es, objective), SMALL,
                       world_seed=ws, label=seed)


def test_single_cell_matrix():
    m = ExperimentMatrix(("synthetic",), ("ei",), (NAIVE,), 1)
    res = run_experiment(m, SMALL, 0)
    assert len(res.rows) == 1 and res.rows[0]["status"] == "ok"
    assert res.rows[0]["final_cumulative_reward"] == res.logs[0].final_reward
    assert res.rows[0]["final_cumulative_reward"] == one_episode().final_reward
    assert res.rows[0]["steps"] == 6


def test_counts_and_sign_test_recomputed():
    m = ExperimentMatrix(("synthetic",), ("ei",), (NAIVE, RANDOM), 5)
    res = run_experiment(m, SMALL, 1)
    assert len(res.rows) == 10 and len(res.aggregates) == 2
    (st,) = res.sign_tests
    naive = {r["seed"]: r["final_cumulative_reward"] for r in res.rows if r["policy"] == "naive"}
    rand = {r["seed"]: r["final_cumulative_reward"] for r in res.rows if r["policy"] == "random"}
    wins = sum(rand[s] > naive[s] for s in range(5))
    losses = sum(rand[s] < naive[s] for s in range(5))
    assert (st["policy"], st["baseline"]) == ("naive", "random")
    assert (st["losses"], st["wins"]) == (wins, losses)
    assert st["p_value"] == pytest.approx(binom_tail(losses, wins + losses) if wins + losses else 1.0, abs=1e-12)
    agg = {a["policy"]: a for a in res.aggregates}
    vals = list(naive.values())
    assert agg["naive"]["mean"] == pytest.approx(np.mean(vals))
    assert agg["naive"]["std"] == pytest.approx(np.std(vals, ddof=1))


def test_failing_cell_is_recorded():
    m = ExperimentMatrix(("no_such_world",), ("ei",), (NAIVE,), 1)
    res = run_experiment(m, SMALL, 0)
    assert res.rows[0]["status"] == "error" and "WorldError" in res.rows[0]["error"]
    assert res.logs == []


def test_episode_log_contract():
    lg = one_episode(RANDOM, 3)
    assert len(lg.rows) == 6
    assert [r["step"] for r in lg.rows] == list(range(6))
    heads = [r for r in lg.rows if r["head"]]
    assert all(r["shaped_reward"] is None and r["generator_calls"] == 0 for r in lg.rows if not r["head"])
    assert lg.total_generator_calls == sum(r["generator_calls"] for r in heads)
    assert shaped_reward_check(lg) <= 1e-9
    assert EpisodeLog.from_csv(lg.to_csv()) == lg
    assert one_episode(RANDOM, 3).to_csv() == lg.to_csv()


def test_emit_outputs(tmp_path):
    m = ExperimentMatrix(("synthetic",), ("ei", "entropy"), (NAIVE, RANDOM), 2)
    res = run_experiment(m, SMALL, 2)
    report = emit_outputs(res.logs, res, tmp_path)
    assert report.notice == ""
    assert len(list((tmp_path / "episodes").glob("*.csv"))) == 8
    assert read_table(tmp_path / "results.csv") == res.rows
    for lg in res.logs:
        assert EpisodeLog.read(tmp_path / "episodes" / f"{lg.file_stem}.csv") == lg
    for svg in ("cumulative_reward.svg", "parameters.svg"):
        root = ET.parse(tmp_path / svg).getroot()
        assert root.tag.endswith("svg")


def test_no_data(tmp_path):
    report = emit_outputs([], None, tmp_path / "x")
    assert report.files == [] and "NoData" in report.notice
    assert not (tmp_path / "x").exists()
    with pytest.raises(NoData):
        write_plots([], tmp_path)


def test_reruns_are_byte_identical(tmp_path):
    m = ExperimentMatrix(("synthetic",), ("pi",), (NAIVE, RANDOM), 2)
    for d in ("a", "b"):
        res = run_experiment(m, SMALL, 9)
        emit_outputs(res.logs, res, tmp_path / d)
    names = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert names
    for n in names:
        if n.name != "timing.csv":
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n


def test_policy_spec_errors(tmp_path):
    with pytest.raises(ConfigError):
        PolicySpec.parse("best_guess")
    with pytest.raises(ConfigError):
        PolicySpec.parse("learned_metadata")
    with pytest.raises(CheckpointError):
        PolicySpec.parse("learned_metadata", str(tmp_path / "missing.ckpt")).resolve()


def test_learned_policy_variant_mismatch(tmp_path):
    tiny = TrainConfig(n_workers=1, steps_per_worker=3, n_updates=1, dims=(4, 4, 2), warmup_episodes=1,
                       seed_samples=2, samples_per_edge=2)
    train(tiny).save(tmp_path / "p.ckpt")
    spec = PolicySpec.parse("learned_metadata", str(tmp_path / "p.ckpt"))
    ctl = spec.resolve()
    assert "ei" in ctl.norms
    with pytest.raises(CheckpointError):
        PolicySpec.parse("learned_fixed_length", str(tmp_path / "p.ckpt")).resolve()
    lg = one_episode(spec)
    assert lg.header["policy"] == "learned_metadata" and lg.header["sigma_obj"] == ctl.norms["ei"].sigma_obj


# -- config --------------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    rc = parse_config(SMALL_YAML)
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(rc))
    assert load_config(p).values == rc.values
    assert load_config(None).values == DEFAULTS
    tc = rc.train_config(4)
    assert tc.dims == (5, 5, 3) and tc.steps_per_worker == 6 and tc.seed == 4
    assert rc.naive_params() == SolverParams(20, 0.9, 0.05, 4)


@pytest.mark.parametrize("bad", [{"world.size": 3}, {"world": {"dims": [2, 2, 2]}}, {"agent.n_updates": "many"},
                                 {"pomcp.z_mode": "sigma"}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        parse_config(bad).train_config(0)


# -- CLI -----------------------------------------------------------------------------


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(yaml.safe_dump(SMALL_YAML))
    return str(p)


def test_cli_episode_and_plot(tmp_path, cfg_file, capsys):
    out = tmp_path / "ep"
    assert main(["episode", "--config", cfg_file, "--seed", "2", "--out", str(out), "--policy", "random"]) == 0
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    lg = EpisodeLog.read(info["episode"])
    assert len(lg.rows) == 6 and info["final_cumulative_reward"] == lg.final_reward
    plots = tmp_path / "plots"
    assert main(["plot", "--out", str(plots), "--logs", str(out)]) == 0
    assert (plots / "parameters.svg").exists()


def test_cli_train_then_eval(tmp_path, cfg_file, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", cfg_file, "--seed", "1", "--out", str(run)]) == 0
    assert (run / "policy.ckpt").exists() and (run / "train_log.csv").read_text().count("\n") == 2
    ev = tmp_path / "eval"
    code = main(["eval", "--config", cfg_file, "--seed", "1", "--out", str(ev),
                 "--checkpoint", str(run / "policy.ckpt")])
    assert code == 0
    rows = read_table(ev / "results.csv")
    assert len(rows) == 6 and {r["policy"] for r in rows} == {"naive", "random"}


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("agent.n_updates: lots\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError"
    assert main(["episode", "--out", str(tmp_path / "o"), "--policy", "learned_metadata",
                 "--checkpoint", str(tmp_path / "none.ckpt")]) == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "CheckpointError"
    assert main(["plot", "--out", str(tmp_path / "empty")]) == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "NoData"
    assert main(["train", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 2

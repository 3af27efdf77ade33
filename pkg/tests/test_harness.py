import csv
import itertools
import json

import numpy as np
import pytest

from gridtopo.agent import CheckpointMismatch, init_params, save_checkpoint
from gridtopo.chronics import STRESS, generate_chronics
from gridtopo.environment import EnvConfig, GridEnv
from gridtopo.harness import (
    DoNothingAgent,
    EvalReport,
    FPFAgent,
    PolicyAgent,
    box_summary,
    evaluate,
    export_report,
    fpf_decide,
    fpf_scores,
    histogram_from_per_scenario,
    replay,
    run_scenario,
    steps_histogram,
    t_p_over,
    top_k_candidates,
)


def longest_runs(rho_log, threshold=1.0):
    out = []
    for col in np.asarray(rho_log).T:
        runs = [len(list(g)) for over, g in itertools.groupby(col > threshold) if over]
        out.append(max(runs, default=0))
    return out


def test_t_p_over_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        log = rng.uniform(0.6, 1.3, (rng.integers(1, 80), 6))
        assert t_p_over(log).tolist() == longest_runs(log)
    log = np.array([[1.2], [1.0], [1.1], [1.1], [0.4]])
    # exactly 1.0 is not an overload
    assert t_p_over(log).tolist() == [2]
    assert t_p_over(np.zeros((0, 3))).tolist() == [0, 0, 0]


def test_histogram_counts():
    steps = [0, 5, 199, 200, 1999, 2000, 2000, 750]
    rows = steps_histogram(steps, 2000)
    assert len(rows) == 10 and rows[0][:2] == (0, 200) and rows[-1][:2] == (1800, 2000)
    assert sum(r[2] for r in rows) == len(steps)
    assert rows[0][2] == 3 and rows[1][2] == 1 and rows[-1][2] == 3
    assert sum(r[2] for r in steps_histogram([], 576)) == 0
    assert steps_histogram([576], 576)[-1] == (400, 600, 1)


def test_box_summary():
    s = box_summary([1, 2, 3, 4, 100])
    assert (s["q1"], s["median"], s["q3"]) == (2.0, 3.0, 4.0)
    assert s["whisker_low"] == 1.0 and s["whisker_high"] == 4.0 and s["n_outliers"] == 1
    assert box_summary([])["n"] == 0


@pytest.fixture(scope="module")
def stress_pool(grid):
    return [generate_chronics(grid, 120, 200 + i, STRESS, name=f"st{i}") for i in range(3)]


def test_fpf_never_worse_than_noop_on_forecast(grid, stress_pool):
    env = GridEnv(grid, EnvConfig())
    state, _ = env.reset(stress_pool[0], 3)
    for _ in range(5):
        scores = fpf_scores(env, state)
        best = fpf_decide(env, state)
        assert scores[best] >= scores[0]
        assert scores[best] == max(scores.values())
        state = env.step(state, best).state
        if state.terminal:
            break


def test_fpf_skips_cooling_substations(grid, stress_pool):
    env = GridEnv(grid, EnvConfig())
    state, _ = env.reset(stress_pool[0], 3)
    catalog = env.catalog
    split = next(i for i, a in enumerate(catalog) if getattr(a, "sub", None) == 4 and i > 0)
    state = env.step(state, split).state
    scores = fpf_scores(env, state)
    assert all(getattr(catalog[i], "sub", None) != 4 for i in scores if i != 0)


def test_top_k_candidates(grid, stress_pool):
    env = GridEnv(grid, EnvConfig())
    state, _ = env.reset(stress_pool[0], 3)
    cands = top_k_candidates(env, state, 2)
    subs = {env.catalog[i].sub for i in cands[1:]}
    hot = int(np.argmax(state.rho))
    assert cands[0] == 0 and len(subs) == 2
    assert subs == {int(grid.line_from[hot]), int(grid.line_to[hot])}


def test_evaluate_and_export(grid, stress_pool, tmp_path):
    report = evaluate(grid, FPFAgent(top_k=2), stress_pool, level=3, env_config=EnvConfig())
    paths = export_report(report, tmp_path)
    assert sorted(p.name for p in paths.values()) == [
        "histogram.csv", "per_scenario.csv", "rho_boxplot.csv", "summary.json", "t_over_boxplot.csv"]
    summary = json.loads(paths["summary.json"].read_text())
    assert summary["n_scenarios"] == 3 and summary["bin_width"] == 200
    assert summary["median_steps"] == float(np.median(report.steps))
    with open(paths["histogram.csv"]) as fh:
        hist = [tuple(int(v) for v in row) for row in list(csv.reader(fh))[1:]]
    assert hist == histogram_from_per_scenario(paths["per_scenario.csv"])
    assert sum(c for _, _, c in hist) == 3
    with open(paths["rho_boxplot.csv"]) as fh:
        assert len(list(csv.reader(fh))) == grid.n_line + 1
    for r in report.results:
        assert r.t_over.tolist() == longest_runs(r.rho_log)
        assert len(r.rho_log) >= 1 and r.rho_log.shape[1] == grid.n_line
    assert len(list((tmp_path / "episodes").glob("*.json"))) == 3


def test_replay_reproduces(grid, stress_pool, tmp_path):
    report = evaluate(grid, FPFAgent(top_k=3), stress_pool[:2], env_config=EnvConfig())
    export_report(report, tmp_path)
    for ch, original in zip(stress_pool[:2], report.results):
        res, check = replay(grid, ch, tmp_path / "episodes" / f"{ch.name}.json")
        assert all(check.values()), check
        assert res.steps == original.steps
        np.testing.assert_array_equal(res.rho_log, original.rho_log)
    doc = json.loads((tmp_path / "episodes" / f"{stress_pool[0].name}.json").read_text())
    doc["catalog_hash"] = "0000"
    with pytest.raises(CheckpointMismatch):
        replay(grid, stress_pool[0], doc)


def test_gate_limits_decisions(grid, stress_pool):
    env = GridEnv(grid, EnvConfig())
    gated = run_scenario(env, DoNothingAgent(), stress_pool[1], 3, gate=0.8)
    always = run_scenario(env, DoNothingAgent(), stress_pool[1], 3, gate=None)
    assert gated.steps == always.steps
    # rows are the states a decision is taken in, plus the final state of a completed run
    pre_step = gated.rho_log if gated.cause != "end_of_scenario" else gated.rho_log[:-1]
    assert gated.decisions == int((pre_step.max(axis=1) > 0.8).sum())
    assert always.decisions == len(pre_step)


def test_empty_report(tmp_path):
    report = EvalReport("do-nothing", 3, "g", "c", n_line=4)
    paths = export_report(report, tmp_path)
    summary = json.loads(paths["summary.json"].read_text())
    assert summary["n_scenarios"] == 0 and summary["median_steps"] is None
    with open(paths["histogram.csv"]) as fh:
        rows = list(csv.reader(fh))[1:]
    assert sum(int(r[2]) for r in rows) == 0


def test_policy_agent_checkpoint(grid, catalog, tmp_path, stress_pool):
    p = init_params(162, len(catalog), seed=0)
    good = save_checkpoint(tmp_path / "ok.npz", p, grid_hash=grid.digest(), catalog_hash=catalog.digest())
    agent = PolicyAgent.from_checkpoint(good, grid, catalog)
    env = GridEnv(grid, EnvConfig(scenario_length=20))
    res = run_scenario(env, agent, stress_pool[0].truncated(20), 3, gate=None)
    assert res.decisions >= 1
    bad = save_checkpoint(tmp_path / "bad.npz", p, grid_hash=grid.digest(), catalog_hash="deadbeef")
    with pytest.raises(CheckpointMismatch):
        PolicyAgent.from_checkpoint(bad, grid, catalog)

import numpy as np
import pytest

from gridtopo.action_space import NodeSplit
from gridtopo.chronics import from_actuals, generate_chronics
from gridtopo.environment import (
    DIVERGED,
    END_OF_SCENARIO,
    ISLANDED,
    LEVELS,
    EnvConfig,
    EpisodeOver,
    GridEnv,
    ScenarioRejected,
    curriculum_level,
    env_config_from_mapping,
    line_margin,
    load_env_config,
    observation_layout,
    reward_fn,
)
from gridtopo.grid_model import make_grid

from helpers import load_series, run_noop, unequal_pair


@pytest.mark.parametrize("x, alpha, expected", [
    (0.95, 1.0, 0.0), (0.95, 10.0, 0.0), (0.0, 1.0, 0.95), (0.0, 10.0, 0.95),
    (1.05, 10.0, -1.0), (1.05, 1.0, -0.1), (0.5, 5.0, 0.45), (2.0, 5.0, -5.25),
])
def test_line_margin(x, alpha, expected):
    assert line_margin(x, alpha) == pytest.approx(expected, abs=1e-12)


def test_margin_slopes():
    xs = np.linspace(0, 2, 401)
    m = line_margin(xs, 7.0)
    below, above = xs < 0.95, xs > 0.95
    assert np.allclose(np.diff(m[below]) / np.diff(xs[below]), -1.0)
    assert np.allclose(np.diff(m[above]) / np.diff(xs[above]), -7.0)


def test_reward_fn():
    assert reward_fn(np.full(20, 0.5), False, 1.0) == pytest.approx(9.0, abs=1e-12)
    assert reward_fn(np.full(20, 0.5), True, 1.0) == -100.0
    assert reward_fn(None, True, 10.0) == -100.0


def test_level_presets():
    assert [(lv.alpha, lv.sot, lv.col, lv.hot) for lv in (LEVELS[1], LEVELS[2], LEVELS[3])] == [
        (1.0, 1e9, 1e9, 1e9), (5.0, 2.0, 15, 1e9), (10.0, 1.0, 3, 1.5)]
    with pytest.raises(ValueError):
        curriculum_level(4)


def test_config_mapping(tmp_path):
    cfg = env_config_from_mapping({"level": 2, "col": 4, "scenario_length": 50})
    assert cfg.level.alpha == 5.0 and cfg.level.col == 4 and cfg.scenario_length == 50
    with pytest.raises(ValueError):
        env_config_from_mapping({"levle": 2})
    path = tmp_path / "env.toml"
    path.write_text("[environment]\nlevel = 1\nsub_cooldown = 5\n")
    cfg = load_env_config(path)
    assert cfg.level == LEVELS[1] and cfg.sub_cooldown == 5


def test_consecutive_overload_trip():
    grid = unequal_pair()
    env = GridEnv(grid, EnvConfig(scenario_length=30))
    ch = load_series([0.5, 2.1, 2.1, 2.1] + [0.5] * 20)
    steps = run_noop(env, ch, 3)
    rho0 = [r.info["rho_bookkeeping"][0] for r in steps[:3]]
    assert all(1.0 < v < 1.5 for v in rho0)
    assert [r.info["tripped_col"] for r in steps[:3]] == [[], [], [0]]
    assert steps[1].state.topo.line_status.all()
    assert not steps[2].state.topo.line_status[0]
    # back in service after the recovery delay
    back = [r.state.t for r in steps if r.info["reconnected"]]
    assert back == [3 + env.config.recovery_delay]
    assert steps[-1].cause == END_OF_SCENARIO


def test_hard_overload_trips_immediately():
    grid = unequal_pair(i_max1=2.0)
    env = GridEnv(grid, EnvConfig(scenario_length=30))
    steps = run_noop(env, load_series([0.5, 2.3, 0.5, 0.5]), 3)
    assert steps[0].info["tripped_hot"] == [0]
    assert steps[0].info["tripped_col"] == []
    assert not steps[0].state.topo.line_status[0]
    assert 1.0 < steps[0].state.rho[1] < 1.5
    assert steps[-1].cause == END_OF_SCENARIO


def test_level_one_never_trips():
    grid = unequal_pair()
    env = GridEnv(grid, EnvConfig(scenario_length=30))
    steps = run_noop(env, load_series([0.5, 2.1, 2.1, 2.1, 2.3, 2.3] + [0.5] * 20), 1)
    assert all(not r.info["tripped_col"] and not r.info["tripped_hot"] for r in steps)
    assert all(r.state.topo.line_status.all() for r in steps)
    overloaded = [r.reward for r in steps if r.state.rho.max() > 1.0]
    assert len(overloaded) == 5
    assert all(v < 0 for v in overloaded)
    assert steps[-1].cause == END_OF_SCENARIO


def test_overload_counter_brute_force():
    grid = unequal_pair()
    env = GridEnv(grid, EnvConfig(scenario_length=200).with_level(LEVELS[3]))
    rng = np.random.default_rng(3)
    loads = np.where(rng.random(120) < 0.5, 1.7, 0.6)
    loads[0] = 0.6
    lvl = env_config_from_mapping({"level": 3, "col": 10**6, "hot": 1e9}).level
    state, _ = env.reset(load_series(loads), lvl)
    history = []
    while not state.terminal:
        state = env.step(state, 0).state
        history.append(state.rho > lvl.sot)
        run_len = np.zeros(grid.n_line, dtype=int)
        for flags in history:
            run_len = np.where(flags, run_len + 1, 0)
        assert np.array_equal(state.overload_counter, run_len)


def test_observation(env, grid):
    ch = generate_chronics(grid, 20, 0)
    state, obs = env.reset(ch, 3)
    assert obs.shape == (162,) == (env.obs_size,)
    assert sum(n for _, n in observation_layout(grid)) == 162
    assert np.all(np.abs(obs) <= 10)
    res = env.step(state, NodeSplit(5, (1, 2, 1, 2, 1, 2)))
    assert np.all(np.abs(res.observation) <= 10)
    assert res.observation[-grid.n_sub + 5] == 1.0


def test_single_step_scenario(env, grid):
    state, _ = env.reset(generate_chronics(grid, 1, 0), 3)
    assert state.terminal and state.cause == END_OF_SCENARIO
    assert state.successful_steps == 1
    with pytest.raises(EpisodeOver):
        env.step(state, 0)


def test_full_scenario_counts_all_steps(env, grid):
    ch = generate_chronics(grid, 40, 1)
    steps = run_noop(env, ch, 3)
    assert len(steps) == 39
    assert steps[-1].state.successful_steps == 40


def test_cooldown_and_illegal_action(env, grid):
    state, _ = env.reset(generate_chronics(grid, 20, 0), 3)
    split = NodeSplit(5, (1, 2, 1, 2, 1, 2))
    r1 = env.step(state, split)
    assert r1.state.sub_cooldown[5] == env.config.sub_cooldown
    assert not env.legal_mask(r1.state)[env.catalog.index(split)]
    r2 = env.step(r1.state, NodeSplit(5, (1,) * 6))
    assert r2.info["illegal"]
    assert r2.state.topo == r1.state.topo
    # blocked for sub_cooldown steps after acting
    state = r2.state
    for _ in range(env.config.sub_cooldown - 2):
        state = env.step(state, NodeSplit(5, (1,) * 6)).state
    assert state.sub_cooldown[5] == 1 and state.topo == r1.state.topo
    r_last = env.step(env.step(state, 0).state, NodeSplit(5, (1,) * 6))
    assert not r_last.info["illegal"]
    assert r_last.state.topo.substation_assignment(grid, 5) == (1,) * 6


def test_islanding_action_terminates(env, grid):
    state, _ = env.reset(generate_chronics(grid, 20, 0), 3)
    # generator 4 alone on busbar 2 of substation 7
    res = env.step(state, NodeSplit(7, (1, 2, 1)))
    assert res.terminal and res.cause == ISLANDED
    assert res.reward == -100.0
    assert res.state.successful_steps == 1


def test_divergence_terminates():
    grid = unequal_pair()
    env = GridEnv(grid, EnvConfig(scenario_length=30))
    steps = run_noop(env, load_series([0.5, 40.0, 0.5]), 1)
    assert steps[0].cause == DIVERGED and steps[0].reward == -100.0


def test_unsolvable_start_rejected():
    env = GridEnv(unequal_pair(), EnvConfig())
    with pytest.raises(ScenarioRejected):
        env.reset(load_series([40.0, 0.5]), 3)


def test_state_is_not_mutated(env, grid):
    state, _ = env.reset(generate_chronics(grid, 20, 0), 3)
    before = (state.topo, state.sub_cooldown.copy(), state.rho.copy())
    env.step(state, NodeSplit(3, (1, 2, 1, 2, 1, 2)))
    assert state.topo == before[0]
    assert np.array_equal(state.sub_cooldown, before[1])
    assert np.array_equal(state.rho, before[2])

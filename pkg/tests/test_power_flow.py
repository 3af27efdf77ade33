import os
import subprocess
import sys

import numpy as np
import pytest

from gridtopo import _kernels
from gridtopo.action_space import NodeSplit, apply_action
from gridtopo.grid_model import TopologyState, build_nodal_graph, check_islanding
from gridtopo.power_flow import Divergence, Injections, power_balance_residual, solve_ac

from helpers import gauss_seidel, random_injections, two_bus_grid


def test_reference_snapshot_converges(grid, snapshot):
    g = build_nodal_graph(grid, TopologyState.nominal(grid))
    sol = solve_ac(grid, g, snapshot)
    assert sol.converged
    assert sol.mismatch < 1e-8
    assert sol.iterations <= 6
    assert 0.5 < sol.rho.max() < 1.0


def test_voltages_match_gauss_seidel(grid, snapshot):
    g = build_nodal_graph(grid, TopologyState.nominal(grid))
    sol = solve_ac(grid, g, snapshot)
    V = gauss_seidel(grid, g, snapshot)
    np.testing.assert_allclose(sol.node_v_mag, np.abs(V), atol=1e-6)
    np.testing.assert_allclose(sol.node_v_angle, np.angle(V), atol=1e-6)


def test_split_voltages_match_gauss_seidel(grid, snapshot):
    topo = apply_action(TopologyState.nominal(grid), NodeSplit(3, (1, 2, 1, 2, 1, 2)), grid)
    g = build_nodal_graph(grid, topo)
    assert not check_islanding(grid, g)
    sol = solve_ac(grid, g, snapshot)
    V = gauss_seidel(grid, g, snapshot)
    assert g.n_nodes == 15
    np.testing.assert_allclose(sol.node_v_mag, np.abs(V), atol=1e-6)
    np.testing.assert_allclose(sol.node_v_angle, np.angle(V), atol=1e-6)


def test_power_balance_random_draws(grid, snapshot):
    rng = np.random.default_rng(7)
    g = build_nodal_graph(grid, TopologyState.nominal(grid))
    worst = 0.0
    for _ in range(100):
        inj = random_injections(grid, snapshot, rng)
        sol = solve_ac(grid, g, inj)
        worst = max(worst, abs(power_balance_residual(sol, inj, grid.slack_gen)))
    assert worst < 1e-6


def test_zero_injection_is_flat():
    grid = two_bus_grid()
    g = build_nodal_graph(grid, TopologyState.nominal(grid))
    inj = Injections(np.zeros(1), np.zeros(1), np.zeros(1), np.ones(1))
    sol = solve_ac(grid, g, inj)
    np.testing.assert_allclose(sol.node_v_mag, 1.0, atol=1e-12)
    np.testing.assert_allclose(sol.node_v_angle, 0.0, atol=1e-12)
    np.testing.assert_allclose(sol.line_current, 0.0, atol=1e-12)
    assert sol.iterations == 0


def test_two_bus_current_split():
    grid = two_bus_grid()
    g = build_nodal_graph(grid, TopologyState.nominal(grid))
    sol = solve_ac(grid, g, Injections(np.array([1.0]), np.zeros(1), np.zeros(1), np.ones(1)))
    # identical parallel lines share the current equally; |I| = P / |V_load|
    assert sol.line_current[0] == pytest.approx(sol.line_current[1], abs=1e-12)
    v_load = sol.node_v_mag[1]
    assert 2 * sol.line_current[0] == pytest.approx(1.0 / v_load, rel=1e-9)


def test_heavy_load_diverges(grid, snapshot):
    g = build_nodal_graph(grid, TopologyState.nominal(grid))
    heavy = Injections(snapshot.load_p * 50, snapshot.load_q * 50, snapshot.gen_p * 50, snapshot.gen_v)
    with pytest.raises(Divergence):
        solve_ac(grid, g, heavy)


def test_warm_start_matches_flat(grid, snapshot):
    g = build_nodal_graph(grid, TopologyState.nominal(grid))
    flat = solve_ac(grid, g, snapshot)
    nudged = Injections(snapshot.load_p * 1.03, snapshot.load_q * 1.03, snapshot.gen_p * 1.03, snapshot.gen_v)
    warm = solve_ac(grid, g, nudged, warm_start=flat)
    cold = solve_ac(grid, g, nudged)
    assert warm.iterations <= cold.iterations
    np.testing.assert_allclose(warm.node_v_mag, cold.node_v_mag, atol=1e-9)
    np.testing.assert_allclose(warm.rho, cold.rho, atol=1e-9)


@pytest.mark.skipif(not _kernels.HAS_NUMBA, reason="numba not installed")
def test_backends_agree(grid, snapshot):
    topo = apply_action(TopologyState.nominal(grid), NodeSplit(1, (1, 2, 1, 2, 1)), grid)
    g = build_nodal_graph(grid, topo)
    a = solve_ac(grid, g, snapshot, kernels=_kernels.get_backend("numpy"))
    b = solve_ac(grid, g, snapshot, kernels=_kernels.get_backend("numba"))
    np.testing.assert_allclose(a.node_v_mag, b.node_v_mag, atol=1e-12)
    np.testing.assert_allclose(a.rho, b.rho, atol=1e-12)
    assert a.iterations == b.iterations


def test_backend_selection():
    assert _kernels.get_backend("numpy").newton is _kernels.newton_numpy
    out = subprocess.run([sys.executable, "-c", "from gridtopo import _kernels; print(_kernels.BACKEND)"],
                         env={**os.environ, "GRIDTOPO_BACKEND": "numpy"}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    with pytest.raises(ValueError):
        _kernels.get_backend("fortran")


def test_injection_shape_checked(grid, snapshot):
    g = build_nodal_graph(grid, TopologyState.nominal(grid))
    with pytest.raises(ValueError):
        solve_ac(grid, g, Injections(snapshot.load_p[:3], snapshot.load_q, snapshot.gen_p, snapshot.gen_v))

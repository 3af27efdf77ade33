"""Compare the numba and numpy power-flow kernels.

Times Newton solves on the reference grid (nominal topology and a sample of
node splits) and full environment steps. Run with ``python3 benchmarks/bench_kernels.py``.
"""
from __future__ import annotations

import argparse
import time

from gridtopo import _kernels
from gridtopo.action_space import apply_action, enumerate_node_splits
from gridtopo.chronics import STRESS, generate_chronics, nominal_snapshot
from gridtopo.environment import EnvConfig, GridEnv
from gridtopo.grid_model import TopologyState, build_nodal_graph, check_islanding, reference_grid
from gridtopo.power_flow import prepare_network, solve_prepared


def _time(fn, repeat: int) -> float:
    fn()  # warm-up (and JIT compile)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench_solve(backend: str, repeat: int) -> dict:
    k = _kernels.get_backend(backend)
    grid = reference_grid()
    inj = nominal_snapshot(grid)
    nominal = TopologyState.nominal(grid)
    topos = [nominal]
    for a in list(enumerate_node_splits(grid))[1::10]:
        t = apply_action(nominal, a, grid)
        if not check_islanding(grid, build_nodal_graph(grid, t)):
            topos.append(t)
    nets = [prepare_network(grid, build_nodal_graph(grid, t), kernels=k) for t in topos]

    def solve_all():
        for net in nets:
            solve_prepared(net, inj, kernels=k)

    def prepare_all():
        for t in topos:
            prepare_network(grid, build_nodal_graph(grid, t), kernels=k)

    per_solve = _time(solve_all, repeat) / len(nets)
    per_prepare = _time(prepare_all, max(1, repeat // 4)) / len(topos)
    return {"solve_us": per_solve * 1e6, "prepare_us": per_prepare * 1e6, "topologies": len(nets)}


def bench_env(backend: str, steps: int) -> float:
    k = _kernels.get_backend(backend)
    grid = reference_grid()
    env = GridEnv(grid, EnvConfig(scenario_length=steps + 1), kernels=k)
    ch = generate_chronics(grid, steps + 1, 7, STRESS)
    env.reset(ch, 1)

    def episode():
        state, _ = env.reset(ch, 1)
        while not state.terminal:
            state = env.step(state, 0).state

    return _time(episode, 3) / steps * 1e6


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--steps", type=int, default=500)
    args = ap.parse_args(argv)
    backends = ["numpy"] + (["numba"] if _kernels.HAS_NUMBA else [])
    rows = {}
    for b in backends:
        r = bench_solve(b, args.repeat)
        r["env_step_us"] = bench_env(b, args.steps)
        rows[b] = r
    print(f"{'backend':8s} {'solve [us]':>11s} {'prepare [us]':>13s} {'env step [us]':>14s}")
    for b, r in rows.items():
        print(f"{b:8s} {r['solve_us']:11.1f} {r['prepare_us']:13.1f} {r['env_step_us']:14.1f}")
    if len(rows) == 2:
        ratio = rows["numpy"]["solve_us"] / rows["numba"]["solve_us"]
        print(f"numba speed-up on Newton solves: {ratio:.1f}x ({rows['numba']['topologies']} topologies)")


if __name__ == "__main__":
    main()

"""AC power flow on a :class:`~gridtopo.grid_model.NodalGraph`.

Newton-Raphson in polar form. Generator nodes are PV (reactive limits are
not enforced), the node holding the slack generator fixes angle 0 and
balances active power, every other energised node is PQ. Nodes that carry
no injection and sit outside the slack component are de-energised (zero
voltage, zero branch current) rather than solved.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .grid_model import GridSpec, NodalGraph, StructuralError, connected_components

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 20


class Divergence(RuntimeError):
    """No power-flow solution was found (non-convergence or singular Jacobian)."""

    def __init__(self, message: str, iterations: int = 0, mismatch: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.mismatch = mismatch


@dataclass(frozen=True)
class Injections:
    """Per-unit nodal injections for one time step."""

    load_p: np.ndarray
    load_q: np.ndarray
    gen_p: np.ndarray
    gen_v: np.ndarray

    def check(self, grid: GridSpec) -> None:
        dims = {"load_p": grid.n_load, "load_q": grid.n_load, "gen_p": grid.n_gen, "gen_v": grid.n_gen}
        for name, n in dims.items():
            if np.shape(getattr(self, name)) != (n,):
                raise StructuralError(f"{name} has shape {np.shape(getattr(self, name))}, grid needs ({n},)")
        if np.any(np.asarray(self.gen_v) <= 0):
            raise StructuralError("generator voltage setpoints must be positive")

    def scaled(self, load_factor: float) -> "Injections":
        return Injections(self.load_p * load_factor, self.load_q * load_factor, self.gen_p * load_factor, self.gen_v)


@dataclass
class PFSolution:
    nodes: tuple[tuple[int, int], ...]
    node_v_mag: np.ndarray
    node_v_angle: np.ndarray
    line_current: np.ndarray  # per line, 0 when out of service
    rho: np.ndarray
    converged: bool
    slack_p: float
    iterations: int
    mismatch: float
    losses: float = 0.0
    gen_p: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def voltage_by_node(self) -> dict[tuple[int, int], tuple[float, float]]:
        return {nd: (float(m), float(a)) for nd, m, a in zip(self.nodes, self.node_v_mag, self.node_v_angle)}

    def to_json(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "mismatch": self.mismatch,
            "slack_p": self.slack_p,
            "losses": self.losses,
            "nodes": [list(nd) for nd in self.nodes],
            "node_v_mag": self.node_v_mag.tolist(),
            "node_v_angle": self.node_v_angle.tolist(),
            "line_current": self.line_current.tolist(),
            "rho": self.rho.tolist(),
        }


@dataclass(frozen=True, eq=False)
class PreparedNetwork:
    """Injection-independent data for one nodal graph (admittance, node roles)."""

    graph: NodalGraph
    n_line: int
    g: np.ndarray
    bm: np.ndarray
    active: np.ndarray  # node indices inside the slack component, solve order
    slack: int  # position of the slack node within ``active``
    slack_gen: int
    pv: np.ndarray  # positions within ``active``
    pq: np.ndarray
    pvpq: np.ndarray
    pv_gen: np.ndarray  # generator whose setpoint fixes each PV node
    gen_pos: np.ndarray  # position in ``active`` per generator
    load_pos: np.ndarray
    edge_from: np.ndarray  # positions within ``active`` (or -1 if dead)
    edge_to: np.ndarray
    edge_live: np.ndarray  # mask over graph edges that are energised
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    i_max: np.ndarray


def prepare_network(grid: GridSpec, graph: NodalGraph, kernels=None) -> PreparedNetwork:
    k = kernels or _kernels
    if graph.slack_node < 0:
        raise StructuralError("slack node absent from graph")
    labels = connected_components(graph)
    main = labels[graph.slack_node]
    injected = np.concatenate([graph.gen_node, graph.load_node])
    if np.any(labels[injected] != main):
        raise StructuralError("islanded load or generator; run check_islanding first")
    active = np.flatnonzero(labels == main)
    pos = -np.ones(graph.n_nodes, dtype=np.int64)
    pos[active] = np.arange(len(active))

    gen_pos = pos[graph.gen_node]
    slack = int(pos[graph.slack_node])
    pv_gen_of: dict[int, int] = {slack: grid.slack_gen}
    for gi, p in enumerate(gen_pos):
        pv_gen_of.setdefault(int(p), gi)
    pv = np.array(sorted(p for p in pv_gen_of if p != slack), dtype=np.int64)
    pv_set = set(pv.tolist()) | {slack}
    pq = np.array([i for i in range(len(active)) if i not in pv_set], dtype=np.int64)

    lines = grid.lines
    eline = graph.edge_line
    r = np.array([lines[i].r for i in eline], dtype=float)
    x = np.array([lines[i].x for i in eline], dtype=float)
    b = np.array([lines[i].b for i in eline], dtype=float)
    ef = pos[graph.edge_from]
    et = pos[graph.edge_to]
    live = (ef >= 0) & (et >= 0)
    g, bm = k.ybus(len(active), ef[live], et[live], r[live], x[live], b[live])
    return PreparedNetwork(
        graph=graph, n_line=grid.n_line, g=g, bm=bm, active=active, slack=slack,
        slack_gen=grid.slack_gen, pv=pv, pq=pq,
        pvpq=np.concatenate([pv, pq]).astype(np.int64),
        pv_gen=np.array([pv_gen_of[int(p)] for p in pv], dtype=np.int64),
        gen_pos=gen_pos, load_pos=pos[graph.load_node], edge_from=ef, edge_to=et, edge_live=live,
        r=r, x=x, b=b, i_max=grid.i_max,
    )


def _initial_point(net: PreparedNetwork, inj: Injections, warm: PFSolution | None):
    n = len(net.active)
    vm = np.ones(n)
    va = np.zeros(n)
    if warm is not None:
        prev = warm.voltage_by_node()
        nodes = net.graph.nodes
        for i, node in enumerate(net.active):
            sub, bus = nodes[node]
            hit = prev.get((sub, bus)) or prev.get((sub, 3 - bus))
            if hit is not None and hit[0] > 0:
                vm[i], va[i] = hit
        va -= va[net.slack]
    vm[net.slack] = inj.gen_v[net.slack_gen]
    if len(net.pv):
        vm[net.pv] = inj.gen_v[net.pv_gen]
    va[net.slack] = 0.0
    return vm, va


def solve_prepared(
    net: PreparedNetwork,
    inj: Injections,
    warm_start: PFSolution | None = None,
    *,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    kernels=None,
) -> PFSolution:
    k = kernels or _kernels
    n = len(net.active)
    p_spec = np.zeros(n)
    q_spec = np.zeros(n)
    np.add.at(p_spec, net.gen_pos, inj.gen_p)
    np.subtract.at(p_spec, net.load_pos, inj.load_p)
    np.subtract.at(q_spec, net.load_pos, inj.load_q)

    vm0, va0 = _initial_point(net, inj, warm_start)
    vm, va, it, norm, status = k.newton(net.g, net.bm, vm0, va0, p_spec, q_spec, net.pvpq, net.pq, tol, max_iter)
    if status != _kernels.CONVERGED:
        reason = {_kernels.MAX_ITER: "no convergence", _kernels.SINGULAR: "singular Jacobian",
                  _kernels.NOT_FINITE: "non-finite iterate"}[int(status)]
        raise Divergence(f"power flow diverged: {reason} after {it} iterations", int(it), float(norm))

    p_inj, _ = k.injections(net.g, net.bm, vm, va)
    live = net.edge_live
    i_f, i_t, p_f, p_t = k.branch(vm, va, net.edge_from[live], net.edge_to[live], net.r[live], net.x[live], net.b[live])
    current = np.zeros(net.n_line)
    current[net.graph.edge_line[live]] = np.maximum(i_f, i_t)

    # slack generator output: node injection plus local load minus other local generation
    sg = net.slack_gen
    at_slack_gen = net.gen_pos == net.slack
    at_slack_gen[sg] = False
    slack_p = float(p_inj[net.slack] + inj.load_p[net.load_pos == net.slack].sum()
                    - inj.gen_p[at_slack_gen].sum())
    gen_p = np.array(inj.gen_p, dtype=float).copy()
    gen_p[sg] = slack_p

    node_vm = np.zeros(net.graph.n_nodes)
    node_va = np.zeros(net.graph.n_nodes)
    node_vm[net.active] = vm
    node_va[net.active] = va
    return PFSolution(
        nodes=net.graph.nodes, node_v_mag=node_vm, node_v_angle=node_va, line_current=current,
        rho=current / net.i_max, converged=True, slack_p=slack_p, iterations=int(it),
        mismatch=float(norm), losses=float(np.sum(p_f) + np.sum(p_t)), gen_p=gen_p,
    )


def solve_ac(
    grid: GridSpec,
    graph: NodalGraph,
    inj: Injections,
    warm_start: PFSolution | None = None,
    *,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    kernels=None,
) -> PFSolution:
    """Solve the AC power flow; raises :class:`Divergence` when no solution is found."""
    inj.check(grid)
    net = prepare_network(grid, graph, kernels=kernels)
    return solve_prepared(net, inj, warm_start, tol=tol, max_iter=max_iter, kernels=kernels)


def power_balance_residual(sol: PFSolution, inj: Injections, slack_gen: int) -> float:
    """Generation minus load minus losses (active power, per unit)."""
    others = np.delete(np.asarray(inj.gen_p, dtype=float), slack_gen).sum()
    return float(others + sol.slack_p - np.sum(inj.load_p) - sol.losses)

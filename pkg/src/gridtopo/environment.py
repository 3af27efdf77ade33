"""Episodic cascading-grid simulator with curriculum-configurable overload enforcement.

Each :meth:`GridEnv.step` runs a fixed pipeline:

1. apply the agent action (illegal -> NoOp), tick cooldowns;
2. advance time and load the next injections;
3. reconnect overload-tripped lines whose recovery timer expired;
4. islanding check and power flow (terminal on failure);
5. hard-overload loop: trip every line above HOT, re-solve, repeat;
6. soft-overload bookkeeping: trip lines that spent COL consecutive steps above SOT;
7. reward, and end-of-scenario detection.

States are values: ``step`` returns a new :class:`EnvState` and never
mutates its input, so a state can be branched for look-ahead.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

from .action_space import NOOP, Action, ActionCatalog, LineSwitch, NodeSplit, apply_action, enumerate_node_splits, is_legal
from .chronics import Chronics
from .grid_model import GridSpec, StructuralError, TopologyState, build_nodal_graph, check_islanding, connected_components
from .power_flow import DEFAULT_MAX_ITER, DEFAULT_TOL, Divergence, Injections, PFSolution, prepare_network, solve_prepared

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

TERMINAL_PENALTY = -100.0
MARGIN_THRESHOLD = 0.95

NONE = "none"
ISLANDED = "islanded"
DIVERGED = "diverged"
END_OF_SCENARIO = "end_of_scenario"
BAD_CAUSES = (ISLANDED, DIVERGED)


class ScenarioRejected(RuntimeError):
    """The scenario cannot start (no power-flow solution at t = 0)."""


class EpisodeOver(RuntimeError):
    """``step`` was called on a terminal state."""


@dataclass(frozen=True)
class CurriculumLevel:
    level: int
    alpha: float
    sot: float
    col: int
    hot: float


LEVELS = {
    1: CurriculumLevel(1, alpha=1.0, sot=1e9, col=10**9, hot=1e9),
    2: CurriculumLevel(2, alpha=5.0, sot=2.0, col=15, hot=1e9),
    3: CurriculumLevel(3, alpha=10.0, sot=1.0, col=3, hot=1.5),
}


def curriculum_level(level: int) -> CurriculumLevel:
    try:
        return LEVELS[int(level)]
    except KeyError:
        raise ValueError(f"curriculum level must be 1, 2 or 3, got {level!r}") from None


@dataclass(frozen=True)
class EnvConfig:
    level: CurriculumLevel = LEVELS[3]
    sub_cooldown: int = 3
    recovery_delay: int = 10
    scenario_length: int = 2000
    pf_tol: float = DEFAULT_TOL
    pf_max_iter: int = DEFAULT_MAX_ITER

    def with_level(self, level: int | CurriculumLevel) -> "EnvConfig":
        lvl = level if isinstance(level, CurriculumLevel) else curriculum_level(level)
        return replace(self, level=lvl)


_CONFIG_KEYS = {"level", "alpha", "sot", "col", "hot", "sub_cooldown", "recovery_delay", "scenario_length"}


def env_config_from_mapping(values: dict[str, Any], base: EnvConfig | None = None) -> EnvConfig:
    """Apply key-value overrides; ``level`` picks the preset that the other keys then adjust."""
    unknown = set(values) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown environment config keys: {sorted(unknown)}")
    cfg = base or EnvConfig()
    lvl = curriculum_level(values["level"]) if "level" in values else cfg.level
    lvl = replace(
        lvl,
        alpha=float(values.get("alpha", lvl.alpha)),
        sot=float(values.get("sot", lvl.sot)),
        col=int(values.get("col", lvl.col)),
        hot=float(values.get("hot", lvl.hot)),
    )
    return replace(
        cfg,
        level=lvl,
        sub_cooldown=int(values.get("sub_cooldown", cfg.sub_cooldown)),
        recovery_delay=int(values.get("recovery_delay", cfg.recovery_delay)),
        scenario_length=int(values.get("scenario_length", cfg.scenario_length)),
    )


def read_config_file(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_env_config(path: str | Path) -> EnvConfig:
    doc = read_config_file(path)
    return env_config_from_mapping(doc.get("environment", {k: v for k, v in doc.items() if not isinstance(v, dict)}))


# ---------------------------------------------------------------------------
# reward


def line_margin(x, alpha: float = 1.0):
    """Piecewise-linear margin proxy: slope -1 below 0.95, slope -alpha above."""
    x = np.asarray(x, dtype=float)
    d = MARGIN_THRESHOLD - x
    out = np.where(x <= MARGIN_THRESHOLD, d, alpha * d)
    return float(out) if out.ndim == 0 else out


def reward_fn(rho, terminal_bad: bool, alpha: float) -> float:
    if terminal_bad:
        return TERMINAL_PENALTY
    return float(np.sum(line_margin(rho, alpha)))


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True, eq=False)
class EnvState:
    t: int
    T: int
    topo: TopologyState
    overload_counter: np.ndarray
    sub_cooldown: np.ndarray
    line_cooldown: np.ndarray
    line_tripped: np.ndarray  # out of service because of an overload trip (auto-reconnect pending)
    solution: PFSolution
    injections: Injections
    chronics: Chronics
    level: CurriculumLevel
    terminal: bool = False
    cause: str = NONE

    @property
    def rho(self) -> np.ndarray:
        return self.solution.rho

    @property
    def successful_steps(self) -> int:
        """Time steps operated before failure (``T`` for a completed scenario)."""
        if self.cause == END_OF_SCENARIO:
            return self.T
        return self.t


@dataclass
class StepResult:
    state: EnvState
    reward: float
    info: dict = field(default_factory=dict)
    env: "GridEnv | None" = field(default=None, repr=False)

    @property
    def terminal(self) -> bool:
        return self.state.terminal

    @property
    def cause(self) -> str:
        return self.state.cause

    @cached_property
    def observation(self) -> np.ndarray:
        return self.env.observe(self.state)


# ---------------------------------------------------------------------------
# observation


def observation_layout(grid: GridSpec) -> list[tuple[str, int]]:
    L, G, D, S = grid.n_line, grid.n_gen, grid.n_load, grid.n_sub
    return [
        ("busbar_line_or", L), ("busbar_line_ex", L), ("busbar_gen", G), ("busbar_load", D),
        ("line_status", L), ("rho", L), ("i_max", L),
        ("gen_p", G), ("gen_v", G), ("load_p", D), ("load_q", D),
        ("sub_cooldown", S),
    ]


def observation_size(grid: GridSpec) -> int:
    return sum(n for _, n in observation_layout(grid))


def encode_observation(grid: GridSpec, state: EnvState, injections: Injections | None = None,
                       cooldown_max: int = 3) -> np.ndarray:
    """Flat, individually scaled state vector in :func:`observation_layout` order.

    Busbar flags are 0 for busbar 1 and 1 for busbar 2; ``i_max`` is divided
    by the largest line limit, generator P by capacity, generator V enters
    as ``(V - 1) * 10``, loads by their per-scenario maximum, cooldowns by
    the configured maximum.
    """
    inj = injections if injections is not None else state.injections
    topo = state.topo
    i_max = grid.i_max
    p_scale, q_scale = state.chronics.load_scale()
    gen_p = state.solution.gen_p if state.solution.gen_p.size else inj.gen_p
    return np.concatenate([
        topo.line_or_bus - 1.0, topo.line_ex_bus - 1.0, topo.gen_bus - 1.0, topo.load_bus - 1.0,
        topo.line_status.astype(float),
        state.solution.rho,
        i_max / i_max.max(),
        gen_p / grid.p_max_pu,
        (np.asarray(inj.gen_v) - 1.0) * 10.0,
        np.asarray(inj.load_p) / p_scale,
        np.asarray(inj.load_q) / q_scale,
        state.sub_cooldown / max(cooldown_max, 1),
    ])


# ---------------------------------------------------------------------------
# environment


class GridEnv:
    """Simulator bound to one grid; episodes are driven through explicit states.

    One instance is meant for one thread. It caches prepared power-flow
    networks per topology, which is what makes look-ahead search cheap.
    """

    def __init__(self, grid: GridSpec, config: EnvConfig | None = None, catalog: ActionCatalog | None = None,
                 kernels=None, cache_size: int = 4096):
        self.grid = grid
        self.config = config or EnvConfig()
        self.catalog = catalog or enumerate_node_splits(grid)
        self.kernels = kernels
        self._cache: OrderedDict[bytes, Any] = OrderedDict()
        self._cache_size = cache_size
        self._i_max = grid.i_max
        self.obs_size = observation_size(grid)

    # -- power flow helpers -------------------------------------------------

    def _network(self, topo: TopologyState):
        """Prepared network for ``topo``, or None when a load/generator is islanded."""
        key = topo.key()
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit[0]
        graph = build_nodal_graph(self.grid, topo)
        net = None if check_islanding(self.grid, graph) else prepare_network(self.grid, graph, self.kernels)
        self._cache[key] = (net,)
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return net

    def _solve(self, topo: TopologyState, inj: Injections, warm: PFSolution | None) -> tuple[PFSolution | None, str]:
        net = self._network(topo)
        if net is None:
            return None, ISLANDED
        try:
            sol = solve_prepared(net, inj, warm, tol=self.config.pf_tol, max_iter=self.config.pf_max_iter,
                                 kernels=self.kernels)
        except Divergence:
            if warm is None:
                return None, DIVERGED
            # a stale warm start can wander off; retry from flat before declaring divergence
            try:
                sol = solve_prepared(net, inj, None, tol=self.config.pf_tol, max_iter=self.config.pf_max_iter,
                                     kernels=self.kernels)
            except Divergence:
                return None, DIVERGED
        return sol, NONE

    # -- episode API --------------------------------------------------------

    def reset(self, chronics: Chronics, level: int | CurriculumLevel | None = None, seed: int | None = None
              ) -> tuple[EnvState, np.ndarray]:
        """Start an episode at t = 0 on the nominal topology."""
        chronics.check(self.grid)
        lvl = self.config.level if level is None else (
            level if isinstance(level, CurriculumLevel) else curriculum_level(level))
        T = min(chronics.T, self.config.scenario_length)
        topo = TopologyState.nominal(self.grid)
        inj = chronics.injections(0)
        sol, cause = self._solve(topo, inj, None)
        if sol is None:
            raise ScenarioRejected(f"scenario {chronics.name!r} has no solution at t=0 ({cause})")
        L, S = self.grid.n_line, self.grid.n_sub
        state = EnvState(
            t=0, T=T, topo=topo,
            overload_counter=np.zeros(L, dtype=np.int64),
            sub_cooldown=np.zeros(S, dtype=np.int64),
            line_cooldown=np.zeros(L, dtype=np.int64),
            line_tripped=np.zeros(L, dtype=bool),
            solution=sol, injections=inj, chronics=chronics, level=lvl,
            terminal=T <= 1, cause=END_OF_SCENARIO if T <= 1 else NONE,
        )
        return state, self.observe(state)

    def observe(self, state: EnvState) -> np.ndarray:
        return encode_observation(self.grid, state, cooldown_max=self.config.sub_cooldown)

    def is_legal(self, state: EnvState, action: Action) -> bool:
        return is_legal(action, state.sub_cooldown, state.line_cooldown, state.topo)

    def legal_mask(self, state: EnvState) -> np.ndarray:
        ready = state.sub_cooldown == 0
        return np.array([True if not isinstance(a, NodeSplit) else bool(ready[a.sub]) for a in self.catalog])

    def step(self, state: EnvState, action: Action | int, injections: Injections | None = None) -> StepResult:
        """Advance one time step. ``injections`` overrides the chronics row (look-ahead)."""
        if state.terminal:
            raise EpisodeOver("step() called on a terminal state")
        if isinstance(action, (int, np.integer)):
            action = self.catalog[int(action)]
        cfg, lvl = self.config, state.level
        info: dict[str, Any] = {"illegal": False, "tripped_hot": [], "tripped_col": [], "reconnected": []}

        topo = state.topo
        if not self.is_legal(state, action):
            info["illegal"] = True
            action = NOOP
        topo = apply_action(topo, action, self.grid)
        info["action"] = action

        sub_cd = np.maximum(state.sub_cooldown - 1, 0)
        line_cd = np.maximum(state.line_cooldown - 1, 0)
        if isinstance(action, NodeSplit):
            sub_cd[action.sub] = cfg.sub_cooldown
        elif isinstance(action, LineSwitch):
            line_cd[action.line] = cfg.sub_cooldown

        t = state.t + 1
        inj = injections if injections is not None else state.chronics.injections(t)

        tripped = state.line_tripped.copy()
        due = tripped & (line_cd == 0)
        if due.any():
            status = topo.line_status.copy()
            status[due] = True
            tripped[due] = False
            topo = topo.replace(line_status=status)
            info["reconnected"] = np.flatnonzero(due).tolist()

        counter = state.overload_counter.copy()

        def finish(sol, cause, reward_rho=None):
            bad = cause in BAD_CAUSES
            end = (not bad) and t >= state.T - 1
            new = EnvState(
                t=t, T=state.T, topo=topo, overload_counter=counter, sub_cooldown=sub_cd, line_cooldown=line_cd,
                line_tripped=tripped, solution=sol if sol is not None else state.solution, injections=inj,
                chronics=state.chronics, level=lvl, terminal=bad or end,
                cause=cause if bad else (END_OF_SCENARIO if end else NONE),
            )
            reward = reward_fn(None if bad else sol.rho, bad, lvl.alpha)
            return StepResult(new, reward, info, self)

        warm = state.solution
        sol, cause = self._solve(topo, inj, warm)
        if sol is None:
            return finish(None, cause)

        for _ in range(self.grid.n_line):
            over = topo.line_status & (sol.rho > lvl.hot)
            if not over.any():
                break
            idx = np.flatnonzero(over)
            info["tripped_hot"].extend(idx.tolist())
            status = topo.line_status.copy()
            status[idx] = False
            topo = topo.replace(line_status=status)
            tripped[idx] = True
            line_cd[idx] = cfg.recovery_delay
            counter[idx] = 0
            sol, cause = self._solve(topo, inj, sol)
            if sol is None:
                return finish(None, cause)

        info["rho_bookkeeping"] = sol.rho
        counter = np.where(topo.line_status & (sol.rho > lvl.sot), counter + 1, 0)
        trip = counter >= lvl.col
        if trip.any():
            idx = np.flatnonzero(trip)
            info["tripped_col"] = idx.tolist()
            status = topo.line_status.copy()
            status[idx] = False
            topo = topo.replace(line_status=status)
            tripped[idx] = True
            line_cd[idx] = cfg.recovery_delay
            counter[idx] = 0
            sol, cause = self._solve(topo, inj, sol)
            if sol is None:
                return finish(None, cause)
        return finish(sol, NONE)


def island_count(grid: GridSpec, topo: TopologyState) -> int:
    return len(set(connected_components(build_nodal_graph(grid, topo)).tolist()))

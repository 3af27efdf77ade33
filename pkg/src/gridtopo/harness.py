"""Baseline agents, the evaluation protocol and report export."""
from __future__ import annotations

import csv
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import __version__
from .action_space import ActionCatalog, NodeSplit
from .agent import CheckpointMismatch, NetworkParams, forward, load_checkpoint, select_action
from .chronics import Chronics
from .environment import ISLANDED, DIVERGED, TERMINAL_PENALTY, EnvConfig, EnvState, GridEnv
from .grid_model import GridSpec

GATE = 0.8
OVERLOAD = 1.0
BIN_WIDTH = 200


class Agent(Protocol):
    name: str

    def decide(self, env: GridEnv, state: EnvState) -> int: ...


class DoNothingAgent:
    name = "do-nothing"

    def decide(self, env: GridEnv, state: EnvState) -> int:
        return 0


def fpf_scores(env: GridEnv, state: EnvState, forecast=None, candidates: Sequence[int] | None = None
               ) -> dict[int, float]:
    """One-step look-ahead reward of each candidate action against the forecast."""
    inj = forecast if forecast is not None else state.chronics.forecast(state.t)
    idx = range(len(env.catalog)) if candidates is None else candidates
    scores = {}
    for i in idx:
        if i != 0 and not env.is_legal(state, env.catalog[i]):
            continue  # would run as NoOp anyway
        res = env.step(state, i, injections=inj)
        scores[i] = TERMINAL_PENALTY if res.cause in (ISLANDED, DIVERGED) else res.reward
    return scores


def top_k_candidates(env: GridEnv, state: EnvState, k: int) -> list[int]:
    """NoOp plus the splits at the ``k`` substations touching the most loaded lines."""
    grid = env.grid
    order = np.argsort(-state.rho, kind="stable")
    subs: list[int] = []
    for line in order:
        for s in (int(grid.line_from[line]), int(grid.line_to[line])):
            if s not in subs:
                subs.append(s)
        if len(subs) >= k:
            break
    keep = set(subs[:k])
    return [0] + [i for i, a in enumerate(env.catalog) if isinstance(a, NodeSplit) and a.sub in keep]


def fpf_decide(env: GridEnv, state: EnvState, forecast=None, top_k: int | None = None) -> int:
    """Greedy single-step forecast search; ties go to the lowest catalog index."""
    cands = None if top_k is None else top_k_candidates(env, state, top_k)
    scores = fpf_scores(env, state, forecast, cands)
    best, best_i = -np.inf, 0
    for i in sorted(scores):
        if scores[i] > best:
            best, best_i = scores[i], i
    return best_i


class FPFAgent:
    name = "fpf"

    def __init__(self, top_k: int | None = None):
        self.top_k = top_k

    def decide(self, env: GridEnv, state: EnvState) -> int:
        return fpf_decide(env, state, top_k=self.top_k)


class PolicyAgent:
    """Trained network acting greedily."""

    name = "checkpoint"

    def __init__(self, params: NetworkParams, mode: str = "argmax", seed: int | None = None):
        self.params = params
        self.mode = mode
        self.rng = np.random.default_rng(seed)

    @classmethod
    def from_checkpoint(cls, path: str | Path, grid: GridSpec, catalog: ActionCatalog) -> "PolicyAgent":
        ck = load_checkpoint(path, catalog_hash=catalog.digest(), grid_hash=grid.digest())
        if ck.params.n_actions != len(catalog):
            raise CheckpointMismatch(f"checkpoint has {ck.params.n_actions} outputs, catalog {len(catalog)}")
        return cls(ck.params)

    def decide(self, env: GridEnv, state: EnvState) -> int:
        probs, _ = forward(self.params, env.observe(state))
        return select_action(probs, self.mode, self.rng)


# -- statistics ---------------------------------------------------------------


def max_run_lengths(mask: np.ndarray) -> np.ndarray:
    """Longest run of True along axis 0, per column."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        m = m[:, None]
    best = np.zeros(m.shape[1], dtype=np.int64)
    cur = np.zeros(m.shape[1], dtype=np.int64)
    for row in m:
        cur = np.where(row, cur + 1, 0)
        best = np.maximum(best, cur)
    return best


def t_p_over(rho_log: np.ndarray, threshold: float = OVERLOAD) -> np.ndarray:
    """Per line, the longest stretch of consecutive steps with rho above ``threshold``."""
    rho_log = np.asarray(rho_log)
    if rho_log.size == 0:
        return np.zeros(rho_log.shape[1] if rho_log.ndim == 2 else 0, dtype=np.int64)
    return max_run_lengths(rho_log > threshold)


def box_summary(values) -> dict:
    """Quartiles, Tukey whiskers (1.5 IQR, clipped to the data) and outlier count."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        return {"n": 0, "median": float("nan"), "q1": float("nan"), "q3": float("nan"),
                "whisker_low": float("nan"), "whisker_high": float("nan"), "n_outliers": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {"n": int(v.size), "median": float(med), "q1": float(q1), "q3": float(q3),
            "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
            "n_outliers": int(v.size - inside.size)}


def steps_histogram(steps: Sequence[int], horizon: int, width: int = BIN_WIDTH) -> list[tuple[int, int, int]]:
    """(bin_start, bin_end, count) rows; the last bin is closed so a full run lands in it."""
    top = max(int(np.ceil(horizon / width)) * width, width)
    edges = np.arange(0, top + width, width)
    counts, _ = np.histogram(np.asarray(steps, dtype=float), bins=edges)
    return [(int(a), int(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)]


# -- evaluation ---------------------------------------------------------------


@dataclass
class ScenarioResult:
    scenario: str
    T: int
    steps: int
    cause: str
    rho_log: np.ndarray  # (steps recorded, n_line)
    actions: list[tuple[int, int]]  # (t, catalog index) for non-NoOp decisions
    t_over: np.ndarray
    total_reward: float = 0.0
    decisions: int = 0

    @property
    def overloaded_steps(self) -> np.ndarray:
        return (self.rho_log > OVERLOAD).sum(axis=0)


@dataclass
class EvalReport:
    agent: str
    level: int
    grid_hash: str
    catalog_hash: str
    results: list[ScenarioResult] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    n_line: int = 0

    @property
    def steps(self) -> np.ndarray:
        return np.array([r.steps for r in self.results], dtype=np.int64)

    def horizon(self) -> int:
        return max([r.T for r in self.results], default=BIN_WIDTH)

    def histogram(self, width: int = BIN_WIDTH):
        return steps_histogram(self.steps, self.horizon(), width)

    def rho_summary(self) -> list[dict]:
        logs = [r.rho_log for r in self.results if len(r.rho_log)]
        stacked = np.concatenate(logs) if logs else np.zeros((0, self.n_line))
        return [dict(line=l, **box_summary(stacked[:, l])) for l in range(self.n_line)]

    def t_over_summary(self) -> list[dict]:
        tov = np.array([r.t_over for r in self.results]).reshape(-1, self.n_line)
        return [dict(line=l, **box_summary(tov[:, l])) for l in range(self.n_line)]


def run_scenario(env: GridEnv, agent: Agent, chronics: Chronics, level: int = 3, gate: float | None = GATE
                 ) -> ScenarioResult:
    state, _ = env.reset(chronics, level)
    rhos = [state.rho.copy()]
    actions: list[tuple[int, int]] = []
    total, decisions = 0.0, 0
    while not state.terminal:
        a = 0
        if gate is None or state.rho.max() > gate:
            a = int(agent.decide(env, state))
            decisions += 1
            if a != 0:
                actions.append((state.t, a))
        res = env.step(state, a)
        total += res.reward
        state = res.state
        if state.cause not in (ISLANDED, DIVERGED):
            rhos.append(state.rho.copy())
    log = np.array(rhos)
    return ScenarioResult(chronics.name, state.T, state.successful_steps, state.cause, log, actions,
                          t_p_over(log), total, decisions)


def evaluate(grid: GridSpec, agent: Agent, scenarios: Sequence[Chronics], level: int = 3,
             env_config: EnvConfig | None = None, catalog: ActionCatalog | None = None,
             gate: float | None = GATE) -> EvalReport:
    env = GridEnv(grid, env_config, catalog)
    report = EvalReport(agent.name, level, grid.digest(), env.catalog.digest(), n_line=grid.n_line,
                        config={"level": level, "gate": gate,
                                "env": {k: v for k, v in vars(env.config).items() if k != "level"}})
    for ch in scenarios:
        report.results.append(run_scenario(env, agent, ch, level, gate))
    return report


# -- export -------------------------------------------------------------------


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


PER_SCENARIO_COLUMNS = ("scenario", "T", "steps", "cause", "decisions", "actions", "total_reward", "max_rho")
BOX_COLUMNS = ("line", "n", "median", "q1", "q3", "whisker_low", "whisker_high", "n_outliers")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def export_report(report: EvalReport, out_dir: str | Path, episodes: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = report.steps
    causes: dict[str, int] = {}
    for r in report.results:
        causes[r.cause] = causes.get(r.cause, 0) + 1
    summary = {
        "agent": report.agent, "level": report.level, "n_scenarios": len(report.results),
        "median_steps": float(np.median(steps)) if len(steps) else None,
        "mean_steps": float(np.mean(steps)) if len(steps) else None,
        "causes": causes, "grid_hash": report.grid_hash, "catalog_hash": report.catalog_hash,
        "version": version_string(), "config": report.config, "bin_width": BIN_WIDTH,
    }
    paths = {name: out / name for name in ("summary.json", "per_scenario.csv", "rho_boxplot.csv",
                                           "t_over_boxplot.csv", "histogram.csv")}
    paths["summary.json"].write_text(json.dumps(summary, indent=2, default=str) + "\n")
    _write_rows(paths["per_scenario.csv"], PER_SCENARIO_COLUMNS, [
        (r.scenario, r.T, r.steps, r.cause, r.decisions, len(r.actions), f"{r.total_reward:.6f}",
         f"{float(r.rho_log.max()) if r.rho_log.size else 0.0:.6f}") for r in report.results])
    _write_rows(paths["rho_boxplot.csv"], BOX_COLUMNS, [[row[c] for c in BOX_COLUMNS] for row in report.rho_summary()])
    _write_rows(paths["t_over_boxplot.csv"], BOX_COLUMNS,
                [[row[c] for c in BOX_COLUMNS] for row in report.t_over_summary()])
    _write_rows(paths["histogram.csv"], ("bin_start", "bin_end", "count"), report.histogram())
    if episodes:
        ep_dir = out / "episodes"
        ep_dir.mkdir(exist_ok=True)
        for r in report.results:
            p = ep_dir / f"{r.scenario or 'scenario'}.json"
            p.write_text(json.dumps({
                "scenario": r.scenario, "level": report.level, "agent": report.agent, "steps": r.steps,
                "cause": r.cause, "actions": [list(a) for a in r.actions],
                "t_over": r.t_over.tolist(), "catalog_hash": report.catalog_hash, "grid_hash": report.grid_hash,
            }) + "\n")
    return paths


def read_per_scenario(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["T"] = int(r["T"])
        r["steps"] = int(r["steps"])
    return rows


def histogram_from_per_scenario(path: str | Path, width: int = BIN_WIDTH):
    rows = read_per_scenario(path)
    return steps_histogram([r["steps"] for r in rows], max([r["T"] for r in rows], default=width), width)


# -- replay -------------------------------------------------------------------


class ScriptedAgent:
    """Replays logged (t, action) decisions; NoOp everywhere else."""

    name = "replay"

    def __init__(self, actions: Sequence[Sequence[int]]):
        self.plan = {int(t): int(a) for t, a in actions}

    def decide(self, env: GridEnv, state: EnvState) -> int:
        return self.plan.get(state.t, 0)


def replay(grid: GridSpec, chronics: Chronics, episode_log: dict | str | Path,
           env_config: EnvConfig | None = None) -> tuple[ScenarioResult, dict]:
    """Re-run a logged episode and compare the re-derived statistics with the log."""
    doc = episode_log if isinstance(episode_log, dict) else json.loads(Path(episode_log).read_text())
    env = GridEnv(grid, env_config)
    if doc.get("catalog_hash") not in (None, env.catalog.digest()):
        raise CheckpointMismatch("episode log was recorded with a different action catalog")
    res = run_scenario(env, ScriptedAgent(doc["actions"]), chronics, int(doc.get("level", 3)), gate=None)
    check = {"steps_match": res.steps == doc.get("steps"), "cause_match": res.cause == doc.get("cause")}
    if "t_over" in doc:
        check["t_over_match"] = res.t_over.tolist() == list(doc["t_over"])
    return res, check

"""Asynchronous advantage actor-critic training with a level curriculum.

Each worker thread owns an environment and a shard of the scenario pool. It
copies the current weights from the :class:`ParameterStore`, plays one
episode, turns it into a gradient and submits it. The store serialises
updates; nothing else is shared except the log and the curriculum scheduler.
"""
from __future__ import annotations

import csv
import logging
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .action_space import ActionCatalog, enumerate_node_splits
from .agent import (NetworkParams, RMSProp, TrainHyper, TrainingError, Trajectory, apply_update,
                    compute_gradients, forward, init_params, save_checkpoint, select_action)
from .chronics import Chronics
from .environment import EnvConfig, GridEnv, ScenarioRejected, observation_size
from .grid_model import GridSpec

log = logging.getLogger(__name__)

BASELINE = "baseline"
CURRICULUM = "curriculum"
TRAINLOG_COLUMNS = ("episode", "scenario", "level", "steps", "reward", "actor_loss", "critic_loss",
                    "rolling_median")


@dataclass(frozen=True)
class TrainConfig:
    num_workers: int = 8
    episodes: int = 2000
    hyper: TrainHyper = field(default_factory=TrainHyper)
    steps_needed: int = 1000
    scenarios_needed: int = 25
    window: int = 15
    checkpoint_every: int = 500
    seed: int = 0
    gate: float | None = 0.8  # None queries the policy at every step
    baseline_level: int = 3
    max_level: int = 3

    def __post_init__(self):
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        if self.steps_needed < 1 or self.scenarios_needed < 1:
            raise ValueError("curriculum thresholds must be >= 1")
        if self.window < 1 or self.episodes < 0:
            raise ValueError("window must be >= 1 and episodes >= 0")


_TRAIN_KEYS = {"num_workers", "episodes", "steps_needed", "scenarios_needed", "window", "checkpoint_every",
               "seed", "gate", "baseline_level"}
_HYPER_KEYS = {"gamma", "lr_actor", "lr_critic", "entropy_coeff", "rollout", "clip_norm", "reward_scale",
               "rms_decay", "rms_eps"}


def train_config_from_mapping(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    unknown = set(values) - _TRAIN_KEYS - _HYPER_KEYS
    if unknown:
        raise ValueError(f"unknown training keys: {sorted(unknown)}")
    hyper = replace(base.hyper, **{k: values[k] for k in _HYPER_KEYS & set(values)})
    kw = {k: values[k] for k in _TRAIN_KEYS & set(values)}
    if "gate" in kw and (kw["gate"] is False or kw["gate"] == "off"):
        kw["gate"] = None
    return replace(base, hyper=hyper, **kw)


def curriculum_check(latest: dict[str, int], steps_needed: int, scenarios_needed: int) -> bool:
    """True when enough distinct scenarios last ran for more than ``steps_needed`` steps."""
    return sum(1 for s in latest.values() if s > steps_needed) >= scenarios_needed


class ParameterStore:
    """Global weights plus optimizer state; submits are serialised."""

    def __init__(self, params: NetworkParams, hyper: TrainHyper):
        self._lock = threading.Lock()
        self._params = params.copy()
        self._opt = RMSProp(hyper.rms_decay, hyper.rms_eps)
        self._hyper = hyper
        self.updates = 0

    def fetch(self) -> NetworkParams:
        with self._lock:
            return self._params.copy()

    def submit(self, grads: NetworkParams) -> int:
        self._params.check_compatible(grads)
        with self._lock:
            self._params = apply_update(self._params, grads, self._opt, self._hyper.lr_actor,
                                        self._hyper.lr_critic)
            self.updates += 1
            return self.updates

    def optimizer(self) -> RMSProp:
        with self._lock:
            return self._opt.copy()


class TrainLog:
    def __init__(self, window: int = 15):
        self.window = window
        self.rows: list[dict] = []
        self._lock = threading.Lock()

    def append(self, **row) -> dict:
        with self._lock:
            row["episode"] = len(self.rows)
            start = max(0, len(self.rows) - self.window + 1)
            tail = [r["steps"] for r in self.rows[start:]] + [row["steps"]]
            row["rolling_median"] = float(np.median(tail))
            self.rows.append(row)
            return row

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def rolling_median(self) -> np.ndarray:
        return self.column("rolling_median")

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAINLOG_COLUMNS)
            for r in self.rows:
                w.writerow([r["episode"], r["scenario"], r["level"], r["steps"], f"{r['reward']:.6f}",
                            f"{r['actor_loss']:.6g}", f"{r['critic_loss']:.6g}", f"{r['rolling_median']:.1f}"])
        return path


def read_trainlog(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("episode", "level", "steps"):
            r[k] = int(r[k])
        for k in ("reward", "actor_loss", "critic_loss", "rolling_median"):
            r[k] = float(r[k])
    return rows


class CurriculumScheduler:
    """Level bookkeeping shared by the workers.

    Only episodes played at the current level count towards the next
    transition, and the per-scenario record is cleared at each transition.
    """

    def __init__(self, mode: str, config: TrainConfig):
        if mode not in (BASELINE, CURRICULUM):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.config = config
        self.level = config.baseline_level if mode == BASELINE else 1
        self.latest: dict[str, int] = {}
        self.transitions: list[tuple[int, int]] = []  # (episode index, new level)
        self._lock = threading.Lock()

    def current(self) -> int:
        with self._lock:
            return self.level

    def record(self, episode: int, scenario: str, level: int, steps: int) -> int | None:
        """Register a finished episode; returns the new level on a transition."""
        with self._lock:
            if self.mode == BASELINE or level != self.level or self.level >= self.config.max_level:
                return None
            self.latest[scenario] = steps
            if curriculum_check(self.latest, self.config.steps_needed, self.config.scenarios_needed):
                self.level += 1
                self.latest = {}
                self.transitions.append((episode, self.level))
                return self.level
            return None


@dataclass
class TrainResult:
    params: NetworkParams
    log: TrainLog
    transitions: list[tuple[int, int]]
    checkpoints: list[Path]
    updates: int
    dropped_updates: int = 0


def shard_pool(pool: Sequence[Chronics], num_workers: int) -> list[list[Chronics]]:
    """Split scenarios across workers; with more workers than scenarios, shards repeat."""
    if not pool:
        raise ValueError("empty scenario pool")
    if num_workers >= len(pool):
        return [[pool[i % len(pool)]] for i in range(num_workers)]
    return [list(pool[i::num_workers]) for i in range(num_workers)]


class Trainer:
    def __init__(self, grid: GridSpec, pool: Sequence[Chronics], config: TrainConfig | None = None,
                 mode: str = CURRICULUM, env_config: EnvConfig | None = None, catalog: ActionCatalog | None = None,
                 out_dir: str | Path | None = None, params: NetworkParams | None = None,
                 on_episode: Callable[[dict], None] | None = None):
        if not pool:
            raise ValueError("empty scenario pool")
        self.grid = grid
        self.pool = list(pool)
        self.config = config or TrainConfig()
        self.mode = mode
        self.env_config = env_config or EnvConfig()
        self.catalog = catalog or enumerate_node_splits(grid)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.on_episode = on_episode
        n_in = observation_size(grid)
        self.store = ParameterStore(params or init_params(n_in, len(self.catalog), seed=self.config.seed),
                                    self.config.hyper)
        self.scheduler = CurriculumScheduler(mode, self.config)
        self.log = TrainLog(self.config.window)
        self.checkpoints: list[Path] = []
        self._claim_lock = threading.Lock()
        self._claimed = 0
        self._dropped = 0
        self._errors: list[BaseException] = []

    # -- bookkeeping ----------------------------------------------------------

    def _claim(self) -> bool:
        with self._claim_lock:
            if self._claimed >= self.config.episodes:
                return False
            self._claimed += 1
            return True

    def _checkpoint(self, name: str, episode: int) -> None:
        if self.out_dir is None:
            return
        path = save_checkpoint(
            self.out_dir / name, self.store.fetch(), grid_hash=self.grid.digest(),
            catalog_hash=self.catalog.digest(),
            meta={"episode": episode, "level": self.scheduler.current(), "mode": self.mode,
                  "updates": self.store.updates, "seed": self.config.seed},
            opt=self.store.optimizer())
        self.checkpoints.append(path)

    # -- worker ---------------------------------------------------------------

    def _submit(self, traj: Trajectory, params: NetworkParams) -> dict:
        h = self.config.hyper
        obs, actions, returns = traj.batch(h.gamma, h.reward_scale)
        if len(actions) == 0:
            return {"actor_loss": 0.0, "critic_loss": 0.0}
        try:
            grads, info = compute_gradients(params, obs, actions, returns, h.entropy_coeff, h.clip_norm)
        except TrainingError as exc:
            log.warning("dropping update: %s", exc)
            with self._claim_lock:
                self._dropped += 1
            return {"actor_loss": float("nan"), "critic_loss": float("nan")}
        self.store.submit(grads)
        return info

    def run_episode(self, env: GridEnv, chronics: Chronics, level: int, rng: np.random.Generator) -> dict:
        h = self.config.hyper
        gate = self.config.gate
        state, _ = env.reset(chronics, level)
        params = self.store.fetch()
        traj = Trajectory(scenario=chronics.name)
        total, decisions = 0.0, 0
        losses = {"actor_loss": 0.0, "critic_loss": 0.0}
        while not state.terminal:
            if gate is None or state.rho.max() > gate:
                obs = env.observe(state)
                probs, _ = forward(params, obs)
                action = select_action(probs, "sample", rng)
                decisions += 1
            else:
                obs, action = None, 0
            res = env.step(state, action)
            traj.append(obs, action, res.reward)
            total += res.reward
            state = res.state
            if h.rollout and decisions >= h.rollout and not state.terminal:
                _, traj.bootstrap = forward(params, env.observe(state))
                info = self._submit(traj, params)
                losses = {k: losses[k] + info[k] for k in losses}
                params = self.store.fetch()
                traj = Trajectory(scenario=chronics.name)
                decisions = 0
        traj.terminal = True
        if traj.rewards:
            info = self._submit(traj, params)
            losses = {k: losses[k] + info[k] for k in losses}
        return {"steps": state.successful_steps, "reward": total, "cause": state.cause, **losses}

    def _worker(self, wid: int, shard: list[Chronics]) -> None:
        rng = np.random.default_rng([self.config.seed, wid])
        env = GridEnv(self.grid, self.env_config, self.catalog)
        order: list[Chronics] = []
        while self._claim():
            if not order:
                order = [shard[i] for i in rng.permutation(len(shard))]
            chronics = order.pop(0)
            level = self.scheduler.current()
            try:
                out = self.run_episode(env, chronics, level, rng)
            except ScenarioRejected as exc:
                log.warning("skipping scenario %s: %s", chronics.name, exc)
                continue
            row = self.log.append(scenario=chronics.name, level=level, steps=out["steps"], reward=out["reward"],
                                  actor_loss=out["actor_loss"], critic_loss=out["critic_loss"], worker=wid,
                                  cause=out["cause"])
            ep = row["episode"]
            new_level = self.scheduler.record(ep, chronics.name, level, out["steps"])
            if new_level is not None:
                log.info("episode %d: advancing to level %d", ep, new_level)
                self._checkpoint(f"ckpt_level{new_level}_ep{ep:06d}.npz", ep)
            every = self.config.checkpoint_every
            if every and (ep + 1) % every == 0:
                self._checkpoint(f"ckpt_ep{ep + 1:06d}.npz", ep)
            if self.on_episode is not None:
                self.on_episode(row)

    def _guarded(self, wid: int, shard: list[Chronics]) -> None:
        try:
            self._worker(wid, shard)
        except BaseException as exc:  # surfaced after join
            self._errors.append(exc)

    def run(self) -> TrainResult:
        shards = shard_pool(self.pool, self.config.num_workers)
        if self.config.num_workers == 1:
            self._worker(0, shards[0])
        else:
            threads = [threading.Thread(target=self._guarded, args=(i, s), name=f"worker-{i}", daemon=True)
                       for i, s in enumerate(shards)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            if self._errors:
                raise self._errors[0]
        if self.out_dir is not None:
            self._checkpoint("final.npz", len(self.log) - 1)
            self.log.write_csv(self.out_dir / "trainlog.csv")
        return TrainResult(self.store.fetch(), self.log, list(self.scheduler.transitions), list(self.checkpoints),
                           self.store.updates, self._dropped)


def train(grid: GridSpec, pool: Sequence[Chronics], config: TrainConfig | None = None, mode: str = CURRICULUM,
          env_config: EnvConfig | None = None, out_dir: str | Path | None = None, **kw) -> TrainResult:
    return Trainer(grid, pool, config, mode, env_config, out_dir=out_dir, **kw).run()

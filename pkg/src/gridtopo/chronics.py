"""Time-indexed injection profiles ("chronics"): synthetic generation and CSV I/O.

Directory layout, one row per time step, header row = element ids::

    loads_p.csv  loads_q.csv  gens_p.csv  gens_v.csv
    loads_p_forecast.csv  loads_q_forecast.csv  gens_p_forecast.csv  gens_v_forecast.csv

Row ``t`` of a ``*_forecast.csv`` file is the forecast, issued at ``t``, of
step ``t + 1``. The last forecast row repeats the last actual row.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .grid_model import GridSpec, StructuralError
from .power_flow import Injections

STEPS_PER_DAY = 288  # 5-minute resolution
POWER_FACTOR = 0.95

_FILES = ("loads_p", "loads_q", "gens_p", "gens_v")


@dataclass(frozen=True, eq=False)
class Chronics:
    load_p: np.ndarray  # (T, n_load)
    load_q: np.ndarray
    gen_p: np.ndarray  # (T, n_gen)
    gen_v: np.ndarray
    load_p_fc: np.ndarray
    load_q_fc: np.ndarray
    gen_p_fc: np.ndarray
    gen_v_fc: np.ndarray
    name: str = ""
    _scale: dict = field(default_factory=dict, repr=False)

    @property
    def T(self) -> int:
        return int(self.load_p.shape[0])

    def injections(self, t: int) -> Injections:
        return Injections(self.load_p[t], self.load_q[t], self.gen_p[t], self.gen_v[t])

    def forecast(self, t: int) -> Injections:
        """Forecast for step ``t + 1`` as known at step ``t``."""
        return Injections(self.load_p_fc[t], self.load_q_fc[t], self.gen_p_fc[t], self.gen_v_fc[t])

    def check(self, grid: GridSpec) -> None:
        if self.T < 1:
            raise StructuralError("chronics need at least one time step")
        for arr, n, label in (
            (self.load_p, grid.n_load, "load_p"), (self.load_q, grid.n_load, "load_q"),
            (self.gen_p, grid.n_gen, "gen_p"), (self.gen_v, grid.n_gen, "gen_v"),
            (self.load_p_fc, grid.n_load, "load_p forecast"), (self.load_q_fc, grid.n_load, "load_q forecast"),
            (self.gen_p_fc, grid.n_gen, "gen_p forecast"), (self.gen_v_fc, grid.n_gen, "gen_v forecast"),
        ):
            if arr.shape != (self.T, n):
                raise StructuralError(f"{label} has shape {arr.shape}, expected ({self.T}, {n})")
        if np.any(self.gen_v <= 0):
            raise StructuralError("generator voltage setpoints must be positive")

    def load_scale(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-load maximum |P| and |Q| over the scenario (observation scaling)."""
        if not self._scale:
            self._scale["p"] = np.maximum(np.abs(self.load_p).max(axis=0), 1e-6)
            self._scale["q"] = np.maximum(np.abs(self.load_q).max(axis=0), 1e-6)
        return self._scale["p"], self._scale["q"]

    def truncated(self, T: int) -> "Chronics":
        if T >= self.T:
            return self
        cut = {name: getattr(self, name)[:T] for name in
               ("load_p", "load_q", "gen_p", "gen_v", "load_p_fc", "load_q_fc", "gen_p_fc", "gen_v_fc")}
        return replace(self, _scale={}, **cut)


def _forecast_rows(actual: np.ndarray, rng: np.random.Generator | None, noise: float) -> np.ndarray:
    fc = np.vstack([actual[1:], actual[-1:]])
    if noise > 0 and rng is not None:
        fc = fc * (1.0 + noise * rng.standard_normal(fc.shape))
    return fc


def from_actuals(load_p, load_q, gen_p, gen_v, name: str = "", *, forecast_noise: float = 0.0,
                 seed: int | None = None) -> Chronics:
    """Wrap actual series; forecasts are next-step actuals (plus optional noise)."""
    arrays = [np.atleast_2d(np.asarray(a, dtype=float)) for a in (load_p, load_q, gen_p, gen_v)]
    rng = np.random.default_rng(seed) if forecast_noise > 0 else None
    fcs = [_forecast_rows(a, rng, forecast_noise) for a in arrays[:3]]
    # setpoints are scheduled, not forecast
    fcs.append(_forecast_rows(arrays[3], None, 0.0))
    return Chronics(*arrays, *fcs, name=name)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class ChronicsProfile:
    peak_scale: float = 1.0  # total-load peak relative to the nominal snapshot
    trough_frac: float = 0.65  # nightly trough relative to the daily peak
    weekend_drop: float = 0.08
    load_jitter: float = 0.08  # per-scenario, per-load scale spread
    noise_sigma: float = 0.015
    noise_phi: float = 0.97
    loss_margin: float = 0.04
    forecast_noise: float = 0.0
    stress_loads: tuple[int, ...] = ()  # loads receiving extra stress
    stress_boost: float = 0.0


STRESS = ChronicsProfile(peak_scale=1.3)
PROFILES = {
    "benign": ChronicsProfile(),
    "training": ChronicsProfile(peak_scale=1.2),
    "stress": STRESS,
}


def profile_by_name(name: str, **overrides) -> ChronicsProfile:
    try:
        base = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
    return replace(base, **overrides) if overrides else base


def nominal_snapshot(grid: GridSpec | None = None) -> Injections:
    """Injections shipped alongside the reference grid."""
    text = resources.files("gridtopo.data").joinpath("ieee14_snapshot.json").read_text(encoding="utf-8")
    doc = json.loads(text)
    inj = Injections(*(np.array(doc[k], dtype=float) for k in ("load_p", "load_q", "gen_p", "gen_v")))
    if grid is not None:
        inj.check(grid)
    return inj


def _daily_shape(steps: np.ndarray, trough: float, rng: np.random.Generator) -> np.ndarray:
    hours = (steps % STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY
    # morning and evening peaks over a night trough, normalised to [trough, 1]
    morning = np.exp(-0.5 * ((hours - 11.0 - rng.normal(0, 0.3)) / 3.0) ** 2)
    evening = np.exp(-0.5 * ((hours - 19.0 - rng.normal(0, 0.3)) / 2.5) ** 2)
    raw = 0.75 * morning + evening
    raw = (raw - raw.min()) / max(np.ptp(raw), 1e-9) if raw.size > 1 else np.ones_like(raw)
    return trough + (1.0 - trough) * raw


def _ar1(rng: np.random.Generator, T: int, n: int, phi: float, sigma: float) -> np.ndarray:
    e = rng.normal(0.0, sigma, size=(T, n))
    out = np.empty((T, n))
    out[0] = e[0] / np.sqrt(max(1 - phi * phi, 1e-9))
    for t in range(1, T):
        out[t] = phi * out[t - 1] + e[t]
    return out


def _availability(kind: str, steps: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    T = len(steps)
    hours = (steps % STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY
    if kind == "solar":
        day = np.clip(np.sin(np.pi * (hours - 6.0) / 13.0), 0.0, None)
        cloud = np.clip(0.8 + _ar1(rng, T, 1, 0.99, 0.03)[:, 0], 0.2, 1.0)
        return day * cloud
    if kind == "wind":
        return np.clip(rng.uniform(0.2, 0.7) + _ar1(rng, T, 1, 0.995, 0.03)[:, 0], 0.02, 0.95)
    if kind == "hydro":
        return np.clip(rng.uniform(0.3, 0.8) + 0.15 * np.sin(2 * np.pi * hours / 24.0 - 1.0), 0.05, 1.0)
    if kind == "thermal":
        return np.full(T, rng.uniform(0.3, 0.8))
    return np.full(T, rng.uniform(0.75, 0.95))


def generate_chronics(
    grid: GridSpec,
    T: int,
    seed: int,
    profile: ChronicsProfile = ChronicsProfile(),
    *,
    base: Injections | None = None,
    name: str = "",
) -> Chronics:
    """Deterministic synthetic week-style chronics for ``grid``.

    Loads follow a two-peak daily cycle with a weekend dip and AR(1)
    noise; total generation covers load plus a loss margin, split in
    proportion to each unit's capacity times its (kind-dependent)
    availability. Reactive load follows a 0.95 lagging power factor.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    base = base if base is not None else nominal_snapshot(grid)
    start = int(rng.integers(0, 7 * STEPS_PER_DAY))
    steps = np.arange(start, start + T)

    daily = _daily_shape(steps, profile.trough_frac, rng)
    day_of_week = (steps // STEPS_PER_DAY) % 7
    weekly = np.where(day_of_week >= 5, 1.0 - profile.weekend_drop, 1.0)
    shape = daily * weekly
    jitter = 1.0 + profile.load_jitter * rng.uniform(-1, 1, size=grid.n_load)
    noise = _ar1(rng, T, grid.n_load, profile.noise_phi, profile.noise_sigma)
    boost = np.ones(grid.n_load)
    if profile.stress_loads:
        boost[list(profile.stress_loads)] += profile.stress_boost
    load_p = profile.peak_scale * np.outer(shape, base.load_p * jitter * boost) * (1.0 + noise)
    load_p = np.maximum(load_p, 0.0)
    load_q = load_p * np.tan(np.arccos(POWER_FACTOR))

    avail = np.column_stack([_availability(g.kind, steps, rng) for g in grid.generators])
    weight = avail * grid.p_max_pu[None, :]
    need = load_p.sum(axis=1) * (1.0 + profile.loss_margin)
    gen_p = weight / weight.sum(axis=1, keepdims=True) * need[:, None]
    gen_v = np.tile(np.asarray(base.gen_v, dtype=float), (T, 1))

    return from_actuals(load_p, load_q, gen_p, gen_v, name=name or f"synthetic_{seed}",
                        forecast_noise=profile.forecast_noise, seed=seed + 1)


# ---------------------------------------------------------------------------
# CSV I/O


def write_chronics(ch: Chronics, directory: str | Path, grid: GridSpec) -> Path:
    ch.check(grid)
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    series = {
        "loads_p": (ch.load_p, ch.load_p_fc, grid.loads), "loads_q": (ch.load_q, ch.load_q_fc, grid.loads),
        "gens_p": (ch.gen_p, ch.gen_p_fc, grid.generators), "gens_v": (ch.gen_v, ch.gen_v_fc, grid.generators),
    }
    for stem, (actual, fc, elements) in series.items():
        header = ",".join(str(el.id) for el in elements)
        np.savetxt(out / f"{stem}.csv", actual, delimiter=",", header=header, comments="", fmt="%.12g")
        np.savetxt(out / f"{stem}_forecast.csv", fc, delimiter=",", header=header, comments="", fmt="%.12g")
    return out


def _read_csv(path: Path, n: int) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
    ids = [h.strip() for h in header.split(",")] if header else []
    if ids != [str(i) for i in range(n)]:
        raise StructuralError(f"{path.name}: header {ids} does not match element ids 0..{n - 1}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, encoding="utf-8")
    if data.size == 0:
        data = data.reshape(0, n)
    return data


def read_chronics(directory: str | Path, grid: GridSpec) -> Chronics:
    d = Path(directory)
    sizes = {"loads_p": grid.n_load, "loads_q": grid.n_load, "gens_p": grid.n_gen, "gens_v": grid.n_gen}
    actual = [_read_csv(d / f"{stem}.csv", sizes[stem]) for stem in _FILES]
    fc_paths = [d / f"{stem}_forecast.csv" for stem in _FILES]
    if all(p.exists() for p in fc_paths):
        fcs = [_read_csv(p, sizes[stem]) for p, stem in zip(fc_paths, _FILES)]
        ch = Chronics(*actual, *fcs, name=d.name)
    else:
        ch = from_actuals(*actual, name=d.name)
    ch.check(grid)
    return ch


def scenario_dirs(root: str | Path) -> list[Path]:
    """Scenario directories under ``root`` (or ``root`` itself if it holds one scenario)."""
    root = Path(root)
    if (root / "loads_p.csv").exists():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "loads_p.csv").exists())


def load_pool(root: str | Path, grid: GridSpec) -> list[Chronics]:
    return [read_chronics(p, grid) for p in scenario_dirs(root)]


def generate_pool(grid: GridSpec, n: int, T: int, seed: int, profile: ChronicsProfile = ChronicsProfile(),
                  prefix: str = "scenario") -> list[Chronics]:
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate_chronics(grid, T, int(s), profile, name=f"{prefix}_{i:03d}") for i, s in enumerate(seeds)]

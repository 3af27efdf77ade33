"""Command-line entry point: ``gridtopo <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .action_space import enumerate_node_splits, verify_catalog
from .chronics import generate_pool, load_pool, nominal_snapshot, profile_by_name, read_chronics, write_chronics
from .environment import EnvConfig, env_config_from_mapping, read_config_file
from .grid_model import build_nodal_graph, check_islanding, load_grid, reference_grid, TopologyState
from .harness import DoNothingAgent, FPFAgent, PolicyAgent, evaluate, export_report, replay
from .power_flow import Divergence, solve_ac
from .trainer import BASELINE, CURRICULUM, TrainConfig, train, train_config_from_mapping

log = logging.getLogger("gridtopo")


def _config(args) -> dict:
    return read_config_file(args.config) if args.config else {}


def _grid(args):
    return load_grid(args.grid) if args.grid else reference_grid()


def _env_config(doc: dict) -> EnvConfig:
    return env_config_from_mapping(doc.get("environment", {}))


def _emit(payload, args, filename: str) -> None:
    text = json.dumps(payload, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / filename).write_text(text + "\n")
    print(text)


def cmd_enumerate(args) -> int:
    grid = _grid(args)
    catalog = enumerate_node_splits(grid)
    if args.verify:
        report = verify_catalog(grid, catalog, args.target)
        report["catalog_hash"] = catalog.digest()
        _emit(report, args, "catalog_verify.json")
        if "deviation" in report:
            print(f"deviation: {report['deviation']}", file=sys.stderr)
        return 0 if report["formula_ok"] else 1
    _emit({"size": len(catalog), "catalog_hash": catalog.digest(), "actions": catalog.to_json()}, args,
          "catalog.json")
    return 0


def cmd_powerflow(args) -> int:
    grid = _grid(args)
    if args.chronics:
        inj = read_chronics(args.chronics, grid).injections(args.t)
    else:
        inj = nominal_snapshot(grid)
    topo = TopologyState.nominal(grid)
    graph = build_nodal_graph(grid, topo)
    if check_islanding(grid, graph):
        print("nominal topology islands an injection", file=sys.stderr)
        return 2
    try:
        sol = solve_ac(grid, graph, inj)
    except Divergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 2
    _emit(sol.to_json(), args, "powerflow.json")
    return 0


def cmd_gen_chronics(args) -> int:
    grid = _grid(args)
    doc = _config(args).get("chronics", {})
    profile_name = args.profile or doc.get("profile", "benign")
    overrides = {}
    if args.peak is not None:
        overrides["peak_scale"] = args.peak
    profile = profile_by_name(profile_name, **overrides)
    n = args.n if args.n is not None else int(doc.get("n", 10))
    T = args.T if args.T is not None else int(doc.get("T", 2016))
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    out = Path(args.out or "chronics")
    pool = generate_pool(grid, n, T, seed, profile, prefix=args.prefix or profile_name)
    for ch in pool:
        write_chronics(ch, out / ch.name, grid)
    print(f"wrote {len(pool)} scenarios of {T} steps to {out}")
    return 0


def cmd_train(args) -> int:
    grid = _grid(args)
    doc = _config(args)
    values = dict(doc.get("training", {}))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.episodes is not None:
        values["episodes"] = args.episodes
    if args.workers is not None:
        values["num_workers"] = args.workers
    cfg = train_config_from_mapping(values, TrainConfig())
    pool = load_pool(args.chronics, grid)
    if not pool:
        print(f"no scenarios under {args.chronics}", file=sys.stderr)
        return 2
    out = Path(args.out or "run")

    def progress(row):
        if row["episode"] % 50 == 0:
            log.info("episode %d level %d steps %d median %.1f", row["episode"], row["level"], row["steps"],
                     row["rolling_median"])

    res = train(grid, pool, cfg, args.mode, _env_config(doc), out_dir=out, on_episode=progress)
    summary = {"mode": args.mode, "episodes": len(res.log), "transitions": res.transitions,
               "updates": res.updates, "dropped_updates": res.dropped_updates,
               "final_rolling_median": float(res.log.rolling_median()[-1]) if len(res.log) else None,
               "checkpoints": [str(p) for p in res.checkpoints]}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    grid = _grid(args)
    doc = _config(args)
    env_cfg = _env_config(doc)
    catalog = enumerate_node_splits(grid)
    if args.agent == "checkpoint":
        if not args.checkpoint:
            print("--checkpoint is required for the checkpoint agent", file=sys.stderr)
            return 2
        agent = PolicyAgent.from_checkpoint(args.checkpoint, grid, catalog)
    elif args.agent == "fpf":
        agent = FPFAgent(top_k=args.top_k)
    else:
        agent = DoNothingAgent()
    pool = load_pool(args.chronics, grid)
    report = evaluate(grid, agent, pool, level=args.level, env_config=env_cfg, catalog=catalog,
                      gate=None if args.no_gate else 0.8)
    paths = export_report(report, args.out or "report")
    steps = report.steps
    print(json.dumps({"agent": agent.name, "scenarios": len(steps),
                      "median_steps": float(np.median(steps)) if len(steps) else None,
                      "files": [str(p) for p in paths.values()]}, indent=2))
    return 0


def cmd_replay(args) -> int:
    grid = _grid(args)
    ch = read_chronics(args.chronics, grid)
    res, check = replay(grid, ch, args.episode, _env_config(_config(args)))
    payload = {"scenario": res.scenario, "steps": res.steps, "cause": res.cause, "t_over": res.t_over.tolist(),
               **check}
    _emit(payload, args, "replay.json")
    return 0 if all(v for k, v in check.items()) else 1


_GLOBALS = ("grid", "config", "seed", "out", "verbose")


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS so a flag given before the subcommand is not reset by the subparser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--grid", help="grid JSON (default: bundled 14-bus reference)")
    common.add_argument("--config", help="TOML config with [environment], [training], [chronics] tables")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gridtopo", description="Grid topology control: simulator, agents, training.",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("enumerate-actions", parents=[common], help="list or verify the node-split catalog")
    s.add_argument("--verify", action="store_true", help="check per-substation counts and the total")
    s.add_argument("--target", type=int, default=156)
    s.set_defaults(func=cmd_enumerate)

    s = sub.add_parser("powerflow", parents=[common], help="solve one snapshot on the nominal topology")
    s.add_argument("--chronics", help="scenario directory; default is the bundled snapshot")
    s.add_argument("--t", type=int, default=0)
    s.set_defaults(func=cmd_powerflow)

    s = sub.add_parser("gen-chronics", parents=[common], help="write synthetic scenarios")
    s.add_argument("--n", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--profile", choices=["benign", "training", "stress"])
    s.add_argument("--peak", type=float, help="override the profile's peak load scale")
    s.add_argument("--prefix")
    s.set_defaults(func=cmd_gen_chronics)

    s = sub.add_parser("train", parents=[common], help="A3C training, curriculum or fixed level 3")
    s.add_argument("--chronics", required=True)
    s.add_argument("--mode", choices=[CURRICULUM, BASELINE], default=CURRICULUM)
    s.add_argument("--episodes", type=int)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="run an agent over scenarios and export statistics")
    s.add_argument("--chronics", required=True)
    s.add_argument("--agent", choices=["do-nothing", "fpf", "checkpoint"], default="do-nothing")
    s.add_argument("--checkpoint")
    s.add_argument("--level", type=int, default=3, choices=[1, 2, 3])
    s.add_argument("--top-k", type=int, help="FPF: only search splits at the k most stressed substations")
    s.add_argument("--no-gate", action="store_true", help="query the agent at every step")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("replay", parents=[common], help="re-run a logged episode and re-derive its statistics")
    s.add_argument("--chronics", required=True, help="scenario directory")
    s.add_argument("--episode", required=True, help="episode log JSON written by evaluate")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in _GLOBALS:
        if not hasattr(args, name):
            setattr(args, name, False if name == "verbose" else None)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return int(args.func(args) or 0)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

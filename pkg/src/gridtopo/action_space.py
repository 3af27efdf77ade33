"""Discrete topology actions: enumeration modulo busbar symmetry, legality, application."""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

from .grid_model import GEN, LINE_EX, LINE_OR, LOAD, GridSpec, StructuralError, TopologyState


class IllegalActionError(ValueError):
    pass


@dataclass(frozen=True)
class NoOp:
    def to_json(self) -> dict:
        return {"type": "noop"}


@dataclass(frozen=True)
class NodeSplit:
    sub: int
    assignment: tuple[int, ...]

    def to_json(self) -> dict:
        return {"type": "node_split", "sub": self.sub, "assignment": list(self.assignment)}


@dataclass(frozen=True)
class LineSwitch:
    line: int
    status: bool

    def to_json(self) -> dict:
        return {"type": "line_switch", "line": self.line, "status": self.status}


Action = Union[NoOp, NodeSplit, LineSwitch]
NOOP = NoOp()


def action_from_json(doc: dict) -> Action:
    kind = doc["type"]
    if kind == "noop":
        return NOOP
    if kind == "node_split":
        return NodeSplit(int(doc["sub"]), tuple(int(v) for v in doc["assignment"]))
    if kind == "line_switch":
        return LineSwitch(int(doc["line"]), bool(doc["status"]))
    raise ValueError(f"unknown action type {kind!r}")


def complement(assignment: Sequence[int]) -> tuple[int, ...]:
    return tuple(3 - int(v) for v in assignment)


def canonicalize(assignment: Sequence[int]) -> tuple[int, ...]:
    """Representative of {a, complement(a)} whose first element is on busbar 1."""
    a = tuple(int(v) for v in assignment)
    if not a:
        raise ValueError("empty assignment")
    return a if a[0] == 1 else complement(a)


def substation_splits(k: int) -> Iterator[tuple[int, ...]]:
    """The 2**(k-1) canonical assignments of a k-element substation, all-busbar-1 first."""
    for rest in itertools.product((1, 2), repeat=k - 1):
        yield (1, *rest)


class ActionCatalog:
    """Fixed indexing of the agent's actions: 0 is NoOp, then node splits by substation.

    The ordering is part of the checkpoint contract: the actor's output
    unit ``i`` always means ``catalog[i]``.
    """

    def __init__(self, actions: Sequence[Action]):
        self.actions: tuple[Action, ...] = tuple(actions)
        self._index = {a: i for i, a in enumerate(self.actions)}
        if len(self._index) != len(self.actions):
            raise ValueError("duplicate actions in catalog")

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> Action:
        return self.actions[i]

    def __iter__(self):
        return iter(self.actions)

    def index(self, action: Action) -> int:
        if isinstance(action, NodeSplit):
            action = NodeSplit(action.sub, canonicalize(action.assignment))
        return self._index[action]

    def node_splits(self) -> list[NodeSplit]:
        return [a for a in self.actions if isinstance(a, NodeSplit)]

    def per_substation(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for a in self.node_splits():
            counts[a.sub] = counts.get(a.sub, 0) + 1
        return counts

    def to_json(self) -> list[dict]:
        return [dict(index=i, **a.to_json()) for i, a in enumerate(self.actions)]

    def digest(self) -> str:
        payload = json.dumps([a.to_json() for a in self.actions], separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def enumerate_node_splits(grid: GridSpec) -> ActionCatalog:
    actions: list[Action] = [NOOP]
    for sub in grid.substations:
        actions.extend(NodeSplit(sub.id, a) for a in substation_splits(sub.k))
    return ActionCatalog(actions)


def expected_catalog_size(grid: GridSpec) -> int:
    return 1 + sum(2 ** (s.k - 1) for s in grid.substations)


def is_legal(action: Action, sub_cooldown: np.ndarray, line_cooldown: np.ndarray, topo: TopologyState) -> bool:
    if isinstance(action, NoOp):
        return True
    if isinstance(action, NodeSplit):
        return 0 <= action.sub < len(sub_cooldown) and sub_cooldown[action.sub] == 0
    if isinstance(action, LineSwitch):
        if not 0 <= action.line < len(line_cooldown):
            return False
        return line_cooldown[action.line] == 0 and bool(topo.line_status[action.line]) != action.status
    return False


def apply_action(topo: TopologyState, action: Action, grid: GridSpec) -> TopologyState:
    """New topology with ``action`` applied; the input is left untouched."""
    if isinstance(action, NoOp):
        return topo
    if isinstance(action, LineSwitch):
        if bool(topo.line_status[action.line]) == action.status:
            raise IllegalActionError(f"line {action.line} already has status {action.status}")
        status = topo.line_status.copy()
        status[action.line] = action.status
        return topo.replace(line_status=status)
    if isinstance(action, NodeSplit):
        elements = grid.substations[action.sub].elements
        if len(action.assignment) != len(elements):
            raise IllegalActionError(
                f"substation {action.sub} has {len(elements)} elements, got {len(action.assignment)} busbars")
        if not set(action.assignment) <= {1, 2}:
            raise IllegalActionError("busbar values must be 1 or 2")
        arrays = {LINE_OR: topo.line_or_bus.copy(), LINE_EX: topo.line_ex_bus.copy(),
                  GEN: topo.gen_bus.copy(), LOAD: topo.load_bus.copy()}
        for (kind, idx), bus in zip(elements, action.assignment):
            arrays[kind][idx] = bus
        return topo.replace(line_or_bus=arrays[LINE_OR], line_ex_bus=arrays[LINE_EX],
                            gen_bus=arrays[GEN], load_bus=arrays[LOAD])
    raise StructuralError(f"not an action: {action!r}")


def verify_catalog(grid: GridSpec, catalog: ActionCatalog, target: int = 156) -> dict:
    """Counts per substation against 2**(k-1), and total node splits against ``target``."""
    per_sub = catalog.per_substation()
    rows = []
    for s in grid.substations:
        rows.append({"sub": s.id, "k": s.k, "count": per_sub.get(s.id, 0), "expected": 2 ** (s.k - 1),
                     "raw": 2 ** s.k})
    total = sum(r["count"] for r in rows)
    report = {
        "per_substation": rows,
        "node_splits": total,
        "raw_assignments": sum(r["raw"] for r in rows),
        "target": target,
        "formula_ok": all(r["count"] == r["expected"] for r in rows),
        "matches_target": total == target,
    }
    if total != target:
        report["deviation"] = (f"catalog holds {total} node splits; the reference count is {target} "
                               f"(difference {total - target})")
    return report

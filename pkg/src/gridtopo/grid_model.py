"""Static grid description, busbar topology and the electrical node graph.

Every substation has two busbars. Each attached element (line end, generator,
load) sits on busbar 1 or 2, and the set of busbars actually carrying
in-service elements defines the electrical nodes the power flow runs on.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class StructuralError(ValueError):
    """Inputs are dimensionally or referentially inconsistent."""


# element kinds, in roster order within a substation
LINE_OR = "line_or"
LINE_EX = "line_ex"
GEN = "gen"
LOAD = "load"


@dataclass(frozen=True)
class LineSpec:
    id: int
    from_sub: int
    to_sub: int
    r: float
    x: float
    b: float
    i_max: float


@dataclass(frozen=True)
class GenSpec:
    id: int
    sub: int
    p_max: float  # MW
    v_set: float
    kind: str = ""


@dataclass(frozen=True)
class LoadSpec:
    id: int
    sub: int


@dataclass(frozen=True)
class SubstationSpec:
    id: int
    name: str
    # (kind, element id) in busbar-assignment order
    elements: tuple[tuple[str, int], ...]

    @property
    def k(self) -> int:
        return len(self.elements)


@dataclass(frozen=True)
class GridSpec:
    base_mva: float
    substations: tuple[SubstationSpec, ...]
    lines: tuple[LineSpec, ...]
    generators: tuple[GenSpec, ...]
    loads: tuple[LoadSpec, ...]
    slack_gen: int
    name: str = ""
    notes: str = ""
    _raw: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_sub(self) -> int:
        return len(self.substations)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_load(self) -> int:
        return len(self.loads)

    @property
    def slack_sub(self) -> int:
        return self.generators[self.slack_gen].sub

    @property
    def line_from(self) -> np.ndarray:
        return np.array([ln.from_sub for ln in self.lines], dtype=np.int64)

    @property
    def line_to(self) -> np.ndarray:
        return np.array([ln.to_sub for ln in self.lines], dtype=np.int64)

    @property
    def i_max(self) -> np.ndarray:
        return np.array([ln.i_max for ln in self.lines], dtype=float)

    @property
    def gen_sub(self) -> np.ndarray:
        return np.array([g.sub for g in self.generators], dtype=np.int64)

    @property
    def load_sub(self) -> np.ndarray:
        return np.array([ld.sub for ld in self.loads], dtype=np.int64)

    @property
    def p_max_pu(self) -> np.ndarray:
        return np.array([g.p_max for g in self.generators], dtype=float) / self.base_mva

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "substations": [{"id": s.id, "name": s.name} for s in self.substations],
            "lines": [
                {"id": ln.id, "from": ln.from_sub, "to": ln.to_sub, "r": ln.r,
                 "x": ln.x, "b": ln.b, "i_max": ln.i_max}
                for ln in self.lines
            ],
            "generators": [
                {"id": g.id, "sub": g.sub, "p_max": g.p_max, "v_set": g.v_set, "kind": g.kind}
                for g in self.generators
            ],
            "loads": [{"id": ld.id, "sub": ld.sub} for ld in self.loads],
            "slack": self.slack_gen,
        }

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _roster(sub: int, lines, gens, loads) -> tuple[tuple[str, int], ...]:
    out: list[tuple[str, int]] = []
    for ln in lines:
        if ln.from_sub == sub:
            out.append((LINE_OR, ln.id))
        if ln.to_sub == sub:
            out.append((LINE_EX, ln.id))
    out += [(GEN, g.id) for g in gens if g.sub == sub]
    out += [(LOAD, ld.id) for ld in loads if ld.sub == sub]
    return tuple(out)


def grid_from_dict(doc: dict) -> GridSpec:
    """Build and validate a :class:`GridSpec` from the JSON document layout."""
    try:
        subs_doc = doc["substations"]
        lines = tuple(
            LineSpec(int(d.get("id", i)), int(d["from"]), int(d["to"]), float(d["r"]),
                     float(d["x"]), float(d.get("b", 0.0)), float(d["i_max"]))
            for i, d in enumerate(doc["lines"])
        )
        gens = tuple(
            GenSpec(int(d.get("id", i)), int(d["sub"]), float(d["p_max"]),
                    float(d["v_set"]), str(d.get("kind", "")))
            for i, d in enumerate(doc["generators"])
        )
        loads = tuple(LoadSpec(int(d.get("id", i)), int(d["sub"])) for i, d in enumerate(doc["loads"]))
        slack = int(doc["slack"])
        base_mva = float(doc["base_mva"])
    except (KeyError, TypeError, ValueError) as exc:
        raise StructuralError(f"malformed grid document: {exc!r}") from exc

    sub_ids = [int(s["id"]) if isinstance(s, dict) else int(s) for s in subs_doc]
    if sub_ids != list(range(len(sub_ids))):
        raise StructuralError("substation ids must be unique and contiguous from 0")
    n_sub = len(sub_ids)
    for kind, items in (("line", lines), ("generator", gens), ("load", loads)):
        if [it.id for it in items] != list(range(len(items))):
            raise StructuralError(f"{kind} ids must be contiguous from 0")
    for ln in lines:
        if not (0 <= ln.from_sub < n_sub and 0 <= ln.to_sub < n_sub):
            raise StructuralError(f"line {ln.id} references an unknown substation")
        if ln.from_sub == ln.to_sub:
            raise StructuralError(f"line {ln.id} connects a substation to itself")
        if not ln.x > 0:
            raise StructuralError(f"line {ln.id} needs x > 0")
        if not ln.i_max > 0:
            raise StructuralError(f"line {ln.id} needs i_max > 0")
    for el in (*gens, *loads):
        if not 0 <= el.sub < n_sub:
            raise StructuralError(f"{type(el).__name__} {el.id} references an unknown substation")
    if not 0 <= slack < len(gens):
        raise StructuralError("slack must name exactly one existing generator")
    if base_mva <= 0:
        raise StructuralError("base_mva must be positive")

    substations = tuple(
        SubstationSpec(
            i,
            str(subs_doc[i].get("name", f"sub_{i}")) if isinstance(subs_doc[i], dict) else f"sub_{i}",
            _roster(i, lines, gens, loads),
        )
        for i in range(n_sub)
    )
    return GridSpec(base_mva, substations, lines, gens, loads, slack,
                    name=str(doc.get("name", "")), notes=str(doc.get("notes", "")), _raw=doc)


def load_grid(path: str | Path) -> GridSpec:
    with open(path, encoding="utf-8") as fh:
        return grid_from_dict(json.load(fh))


def reference_grid() -> GridSpec:
    """The shipped 14-substation / 20-line reference grid."""
    text = resources.files("gridtopo.data").joinpath("ieee14.json").read_text(encoding="utf-8")
    return grid_from_dict(json.loads(text))


def reference_grid_path() -> Path:
    return Path(str(resources.files("gridtopo.data").joinpath("ieee14.json")))


# ---------------------------------------------------------------------------
# topology


def _frozen(a: Iterable, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TopologyState:
    """Busbar assignment (1 or 2) per element plus per-line service status."""

    line_or_bus: np.ndarray
    line_ex_bus: np.ndarray
    gen_bus: np.ndarray
    load_bus: np.ndarray
    line_status: np.ndarray

    def __post_init__(self):
        for name in ("line_or_bus", "line_ex_bus", "gen_bus", "load_bus"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.int8))
        object.__setattr__(self, "line_status", _frozen(self.line_status, bool))

    @classmethod
    def nominal(cls, grid: GridSpec) -> "TopologyState":
        L = grid.n_line
        return cls(np.ones(L), np.ones(L), np.ones(grid.n_gen), np.ones(grid.n_load), np.ones(L, bool))

    def replace(self, **changes) -> "TopologyState":
        fields = dict(
            line_or_bus=self.line_or_bus, line_ex_bus=self.line_ex_bus, gen_bus=self.gen_bus,
            load_bus=self.load_bus, line_status=self.line_status,
        )
        fields.update(changes)
        return TopologyState(**fields)

    def key(self) -> bytes:
        return b"".join(a.tobytes() for a in
                        (self.line_or_bus, self.line_ex_bus, self.gen_bus, self.load_bus, self.line_status))

    def __eq__(self, other) -> bool:
        return isinstance(other, TopologyState) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    def check(self, grid: GridSpec) -> None:
        L, G, D = grid.n_line, grid.n_gen, grid.n_load
        shapes = {
            "line_or_bus": L, "line_ex_bus": L, "gen_bus": G, "load_bus": D, "line_status": L,
        }
        for name, n in shapes.items():
            if getattr(self, name).shape != (n,):
                raise StructuralError(f"{name} has shape {getattr(self, name).shape}, grid needs ({n},)")
        for name in ("line_or_bus", "line_ex_bus", "gen_bus", "load_bus"):
            arr = getattr(self, name)
            if arr.size and not np.isin(arr, (1, 2)).all():
                raise StructuralError(f"{name} entries must be busbar 1 or 2")

    def substation_assignment(self, grid: GridSpec, sub: int) -> tuple[int, ...]:
        lookup = {LINE_OR: self.line_or_bus, LINE_EX: self.line_ex_bus, GEN: self.gen_bus, LOAD: self.load_bus}
        return tuple(int(lookup[kind][i]) for kind, i in grid.substations[sub].elements)


# ---------------------------------------------------------------------------
# nodal graph


@dataclass(frozen=True, eq=False)
class NodalGraph:
    """Bus-branch view of a topology.

    ``nodes`` holds the (substation, busbar) pairs that carry at least one
    in-service line end, generator or load, sorted lexicographically. Edge
    arrays are indexed by in-service line in line-id order.
    """

    nodes: tuple[tuple[int, int], ...]
    edge_line: np.ndarray
    edge_from: np.ndarray
    edge_to: np.ndarray
    gen_node: np.ndarray  # node index per generator
    load_node: np.ndarray  # node index per load
    slack_node: int  # -1 when the slack generator is absent

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def node_index(self) -> dict[tuple[int, int], int]:
        return {nd: i for i, nd in enumerate(self.nodes)}

    @property
    def node_injections(self) -> list[dict[str, list[int]]]:
        out = [{"gens": [], "loads": []} for _ in self.nodes]
        for g, n in enumerate(self.gen_node):
            out[n]["gens"].append(g)
        for d, n in enumerate(self.load_node):
            out[n]["loads"].append(d)
        return out


def build_nodal_graph(grid: GridSpec, topo: TopologyState, slack_gen: int | None = None) -> NodalGraph:
    topo.check(grid)
    status = topo.line_status
    f_sub, t_sub = grid.line_from, grid.line_to
    keys: set[tuple[int, int]] = set()
    live = np.flatnonzero(status)
    for ln in live:
        keys.add((int(f_sub[ln]), int(topo.line_or_bus[ln])))
        keys.add((int(t_sub[ln]), int(topo.line_ex_bus[ln])))
    gen_keys = [(int(s), int(b)) for s, b in zip(grid.gen_sub, topo.gen_bus)]
    load_keys = [(int(s), int(b)) for s, b in zip(grid.load_sub, topo.load_bus)]
    keys.update(gen_keys)
    keys.update(load_keys)
    nodes = tuple(sorted(keys))
    index = {nd: i for i, nd in enumerate(nodes)}
    edge_from = np.array([index[(int(f_sub[ln]), int(topo.line_or_bus[ln]))] for ln in live], dtype=np.int64)
    edge_to = np.array([index[(int(t_sub[ln]), int(topo.line_ex_bus[ln]))] for ln in live], dtype=np.int64)
    slack = grid.slack_gen if slack_gen is None else slack_gen
    gen_node = np.array([index[k] for k in gen_keys], dtype=np.int64)
    return NodalGraph(
        nodes=nodes,
        edge_line=live.astype(np.int64),
        edge_from=edge_from,
        edge_to=edge_to,
        gen_node=gen_node,
        load_node=np.array([index[k] for k in load_keys], dtype=np.int64),
        slack_node=int(gen_node[slack]) if 0 <= slack < len(gen_node) else -1,
    )


def connected_components(g: NodalGraph) -> np.ndarray:
    """Component label per node; each label is the lowest node index it contains."""
    n = g.n_nodes
    parent = np.arange(n)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in zip(g.edge_from, g.edge_to):
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            # keep the smaller index as root so labels are canonical
            if ra < rb:
                parent[rb] = ra
            else:
                parent[ra] = rb
    return np.array([find(i) for i in range(n)], dtype=np.int64)


def component_partition(g: NodalGraph) -> list[list[int]]:
    labels = connected_components(g)
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(i)
    return [groups[k] for k in sorted(groups)]


def check_islanding(grid: GridSpec, g: NodalGraph, labels: np.ndarray | None = None) -> bool:
    """True when some load or generator node is cut off from the slack node."""
    if g.slack_node < 0:
        raise StructuralError("slack generator node is absent from the graph")
    if labels is None:
        labels = connected_components(g)
    main = labels[g.slack_node]
    injected = np.concatenate([g.gen_node, g.load_node])
    return bool(np.any(labels[injected] != main))


def islanded_elements(grid: GridSpec, g: NodalGraph) -> dict[str, list[int]]:
    labels = connected_components(g)
    main = labels[g.slack_node]
    return {
        "gens": [int(i) for i in np.flatnonzero(labels[g.gen_node] != main)],
        "loads": [int(i) for i in np.flatnonzero(labels[g.load_node] != main)],
    }


def substation_counts(grid: GridSpec) -> list[int]:
    return [s.k for s in grid.substations]


def describe(grid: GridSpec) -> str:
    parts = [f"{grid.name or 'grid'}: {grid.n_sub} substations, {grid.n_line} lines, "
             f"{grid.n_gen} generators, {grid.n_load} loads"]
    parts.append("elements per substation: " + ", ".join(str(k) for k in substation_counts(grid)))
    return "\n".join(parts)


def make_grid(
    n_sub: int,
    lines: Sequence[tuple[int, int, float, float, float, float]],
    gen_subs: Sequence[int],
    load_subs: Sequence[int],
    *,
    slack: int = 0,
    base_mva: float = 100.0,
    p_max: float = 100.0,
    v_set: float = 1.0,
) -> GridSpec:
    """Small-grid convenience builder; ``lines`` rows are (from, to, r, x, b, i_max)."""
    doc = {
        "base_mva": base_mva,
        "substations": [{"id": i} for i in range(n_sub)],
        "lines": [{"id": i, "from": f, "to": t, "r": r, "x": x, "b": b, "i_max": im}
                  for i, (f, t, r, x, b, im) in enumerate(lines)],
        "generators": [{"id": i, "sub": s, "p_max": p_max, "v_set": v_set} for i, s in enumerate(gen_subs)],
        "loads": [{"id": i, "sub": s} for i, s in enumerate(load_subs)],
        "slack": slack,
    }
    return grid_from_dict(doc)

"""Pointed-DAG environments: validation, graded canonicalization, hypergrid, enumeration.

States are dense integers 0..n-1 (stable ordering for tabular policies and
reproducibility); each carries an opaque label used only for display and
serialization. Hypergrid cells are numbered row-major over coordinates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

TRAJECTORY_CAP = 1_000_000


class DagValidationError(ValueError):
    pass


class EnumerationCapError(RuntimeError):
    pass


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    error: str | None = None
    offender: object = None

    def raise_if_invalid(self) -> None:
        if not self.ok:
            raise DagValidationError(f"{self.error} (offender: {self.offender!r})")


class PointedDag:
    """A finite DAG with a unique source (initial state) whose sinks are terminating.

    ``layer_index`` is present iff the DAG is graded (every edge goes from
    layer i to layer i+1). ``exit_child`` optionally distinguishes, per state,
    the child reached by an "exit" action; only environments that define it
    support exit-logit shaping of the behavior policy.
    """

    def __init__(
        self,
        labels: Sequence[object],
        edges: Sequence[tuple[int, int]],
        initial: int,
        terminating: Iterable[int],
        layer_index: Sequence[int] | None = None,
        exit_child: dict[int, int] | None = None,
    ):
        self.labels = tuple(labels)
        self.edges = tuple((int(a), int(b)) for a, b in edges)
        self.initial = int(initial)
        self.terminating = frozenset(int(x) for x in terminating)
        self.layer_index = None if layer_index is None else tuple(int(l) for l in layer_index)
        self.exit_child = None if exit_child is None else dict(exit_child)

        n = len(self.labels)
        children: list[list[int]] = [[] for _ in range(n)]
        parents: list[list[int]] = [[] for _ in range(n)]
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise DagValidationError(f"edge ({a},{b}) references unknown state")
            children[a].append(b)
            parents[b].append(a)
        # Canonical neighbor ordering: ascending state id.
        self._children = tuple(tuple(sorted(c)) for c in children)
        self._parents = tuple(tuple(sorted(p)) for p in parents)

    @property
    def n_states(self) -> int:
        return len(self.labels)

    def children(self, s: int) -> tuple[int, ...]:
        return self._children[s]

    def parents(self, s: int) -> tuple[int, ...]:
        return self._parents[s]

    def is_terminating(self, s: int) -> bool:
        return s in self.terminating

    def terminating_sorted(self) -> tuple[int, ...]:
        return tuple(sorted(self.terminating))

    def topological_order(self) -> tuple[int, ...]:
        order, state = [], [0] * self.n_states  # 0 unvisited, 1 active, 2 done
        for root in range(self.n_states):
            if state[root]:
                continue
            stack: list[tuple[int, int]] = [(root, 0)]
            state[root] = 1
            while stack:
                s, i = stack.pop()
                if i < len(self._children[s]):
                    stack.append((s, i + 1))
                    c = self._children[s][i]
                    if state[c] == 1:
                        raise DagValidationError(f"cycle through state {c}")
                    if state[c] == 0:
                        state[c] = 1
                        stack.append((c, 0))
                else:
                    state[s] = 2
                    order.append(s)
        order.reverse()
        return tuple(order)

    def structurally_equal(self, other: "PointedDag") -> bool:
        return (
            self.labels == other.labels
            and self.edges == other.edges
            and self.initial == other.initial
            and self.terminating == other.terminating
            and self.layer_index == other.layer_index
        )


def validate_pointed_dag(dag: PointedDag) -> ValidationReport:
    """Check every PointedDag invariant; report the first violation found."""
    n = dag.n_states
    if n == 0:
        return ValidationReport(False, "no states")
    if not (0 <= dag.initial < n):
        return ValidationReport(False, "initial state unknown", dag.initial)
    seen_edges = set()
    for e in dag.edges:
        if e in seen_edges:
            return ValidationReport(False, "duplicate edge", e)
        seen_edges.add(e)
        if e[0] == e[1]:
            return ValidationReport(False, "cycle detected", e)

    # Cycle check via DFS three-coloring.
    color = [0] * n
    for root in range(n):
        if color[root]:
            continue
        stack: list[tuple[int, int]] = [(root, 0)]
        color[root] = 1
        while stack:
            s, i = stack.pop()
            if i < len(dag.children(s)):
                stack.append((s, i + 1))
                c = dag.children(s)[i]
                if color[c] == 1:
                    return ValidationReport(False, "cycle detected", c)
                if color[c] == 0:
                    color[c] = 1
                    stack.append((c, 0))
            else:
                color[s] = 2

    sources = [s for s in range(n) if not dag.parents(s)]
    if len(sources) > 1:
        return ValidationReport(False, "multiple sources", tuple(sources))
    if not sources or sources[0] != dag.initial:
        return ValidationReport(False, "initial state has incoming edges", dag.initial)

    for s in range(n):
        if s in dag.terminating and dag.children(s):
            return ValidationReport(False, "terminating state with outgoing edge", s)
        if not dag.children(s) and s not in dag.terminating:
            return ValidationReport(False, "sink not marked terminating", s)

    reachable = {dag.initial}
    frontier = [dag.initial]
    while frontier:
        s = frontier.pop()
        for c in dag.children(s):
            if c not in reachable:
                reachable.add(c)
                frontier.append(c)
    if len(reachable) < n:
        missing = min(set(range(n)) - reachable)
        return ValidationReport(False, "unreachable state", missing)
    # Acyclicity plus "all sinks terminate" already imply every state reaches
    # a terminating state, so no separate check is needed.

    if dag.layer_index is not None:
        if dag.layer_index[dag.initial] != 0:
            return ValidationReport(False, "initial state not in layer 0", dag.initial)
        for a, b in dag.edges:
            if dag.layer_index[b] != dag.layer_index[a] + 1:
                return ValidationReport(False, "edge skips a layer", (a, b))
        top = max(dag.layer_index)
        for x in dag.terminating:
            if dag.layer_index[x] != top:
                return ValidationReport(False, "terminating state not in maximal layer", x)
    return ValidationReport(True)


def require_valid(dag: PointedDag) -> PointedDag:
    validate_pointed_dag(dag).raise_if_invalid()
    return dag


def longest_path_lengths(dag: PointedDag) -> list[int]:
    """Length of the longest path from the initial state to each state."""
    depth = [0] * dag.n_states
    for s in dag.topological_order():
        for c in dag.children(s):
            depth[c] = max(depth[c], depth[s] + 1)
    return depth


def to_graded(dag: PointedDag) -> PointedDag:
    """Canonically insert dummy states so every edge connects adjacent layers.

    Each edge s->s' becomes a chain of target_layer(s') - depth(s) edges, where
    depth is the longest-path distance from the initial state and terminating
    states are all lifted to the maximal depth. Dummy labels record the original
    edge, so complete trajectories of the output biject with those of the input
    (drop the dummies). Idempotent: a graded input is returned unchanged.
    """
    require_valid(dag)
    depth = longest_path_lengths(dag)
    top = max(depth) if depth else 0

    labels = list(dag.labels)
    new_edges: list[tuple[int, int]] = []
    for a, b in dag.edges:
        target = top if dag.is_terminating(b) else depth[b]
        steps = target - depth[a]
        prev = a
        for j in range(1, steps):
            labels.append(("dummy", dag.labels[a], dag.labels[b], j))
            d = len(labels) - 1
            new_edges.append((prev, d))
            prev = d
        new_edges.append((prev, b))

    layer = [0] * len(labels)
    for s in range(dag.n_states):
        layer[s] = top if dag.is_terminating(s) else depth[s]
    # Dummy layers follow from their position along the expanded edge.
    k = dag.n_states
    for a, b in dag.edges:
        target = top if dag.is_terminating(b) else depth[b]
        for j in range(1, target - depth[a]):
            layer[k] = depth[a] + j
            k += 1

    return PointedDag(labels, new_edges, dag.initial, dag.terminating, layer_index=layer)


def project_trajectory(graded: PointedDag, dag: PointedDag, traj: Sequence[int]) -> tuple[int, ...]:
    """Map a trajectory of a to_graded output back to the original DAG."""
    return tuple(s for s in traj if s < dag.n_states)


# ---------------------------------------------------------------------------
# Hypergrid environment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HypergridSpec:
    H: int
    D: int
    R0: float

    def __post_init__(self):
        if self.H < 2:
            raise ValueError("side length H must be >= 2")
        if self.D < 1:
            raise ValueError("dimension D must be >= 1")
        if not self.R0 > 0:
            raise ValueError("R0 must be positive")

    @property
    def n_cells(self) -> int:
        return self.H ** self.D


@dataclass
class RewardTable:
    """Strictly positive rewards over the terminating states of a DAG."""

    values: dict[int, float]
    log_values: dict[int, float] = field(init=False)

    def __post_init__(self):
        for x, r in self.values.items():
            if not (r > 0 and math.isfinite(r)):
                raise ValueError(f"reward at state {x} must be finite and positive, got {r}")
        self.log_values = {x: math.log(r) for x, r in self.values.items()}

    def reward(self, x: int) -> float:
        return self.values[x]

    def log_reward(self, x: int) -> float:
        return self.log_values[x]

    def log_partition(self) -> float:
        return math.log(sum(self.values.values()))

    def check_domain(self, dag: PointedDag) -> None:
        if set(self.values) != set(dag.terminating):
            raise ValueError("reward domain does not equal the terminating set")


def hypergrid_reward(coords: Sequence[int], spec: HypergridSpec) -> float:
    """Reward of a grid cell: a base level plus two nested corner plateaus.

    The first indicator uses a half-open interval (0.25, 0.5], the second an
    open interval (0.3, 0.4), both on |c/(H-1) - 0.5| per coordinate.
    """
    if len(coords) != spec.D:
        raise ValueError("coordinate dimension mismatch")
    outer = inner = 1.0
    for c in coords:
        if not 0 <= c <= spec.H - 1:
            raise ValueError(f"coordinate {c} out of range [0, {spec.H - 1}]")
        t = abs(c / (spec.H - 1) - 0.5)
        outer *= 1.0 if 0.25 < t <= 0.5 else 0.0
        inner *= 1.0 if 0.3 < t < 0.4 else 0.0
    return spec.R0 + 0.5 * outer + 2.0 * inner


def grid_cell_id(coords: Sequence[int], spec: HypergridSpec) -> int:
    """Row-major rank of a cell (last coordinate varies fastest)."""
    rank = 0
    for c in coords:
        rank = rank * spec.H + c
    return rank


def grid_cell_coords(rank: int, spec: HypergridSpec) -> tuple[int, ...]:
    coords = []
    for _ in range(spec.D):
        coords.append(rank % spec.H)
        rank //= spec.H
    return tuple(reversed(coords))


def build_hypergrid(spec: HypergridSpec) -> tuple[PointedDag, RewardTable]:
    """Grid cells plus one terminating copy each; increments plus an exit action.

    State ids: cell c -> grid_cell_id(c), terminating copy of c -> n_cells +
    grid_cell_id(c). The result is not graded (exit is available at every
    depth); apply to_graded if gradedness is needed.
    """
    G = spec.n_cells
    labels: list[object] = [None] * (2 * G)
    edges: list[tuple[int, int]] = []
    exit_child: dict[int, int] = {}
    for rank in range(G):
        coords = grid_cell_coords(rank, spec)
        labels[rank] = coords
        labels[G + rank] = coords + ("T",)
        for d in range(spec.D):
            if coords[d] < spec.H - 1:
                nxt = coords[:d] + (coords[d] + 1,) + coords[d + 1:]
                edges.append((rank, grid_cell_id(nxt, spec)))
        edges.append((rank, G + rank))
        exit_child[rank] = G + rank
    dag = PointedDag(labels, edges, 0, range(G, 2 * G), exit_child=exit_child)
    rewards = RewardTable(
        {G + rank: hypergrid_reward(grid_cell_coords(rank, spec), spec) for rank in range(G)}
    )
    return dag, rewards


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------

def count_complete_trajectories(dag: PointedDag) -> int:
    paths = [0] * dag.n_states
    for s in reversed(dag.topological_order()):
        paths[s] = 1 if s in dag.terminating else sum(paths[c] for c in dag.children(s))
    return paths[dag.initial]


def enumerate_complete_trajectories(
    dag: PointedDag, cap: int = TRAJECTORY_CAP
) -> list[tuple[int, ...]]:
    """Every path from the initial state to a terminating state, each once.

    Deterministic order: depth-first, children in ascending id. Raises
    EnumerationCapError when the trajectory count exceeds ``cap`` (the
    instance is too large for exact oracles).
    """
    require_valid(dag)
    total = count_complete_trajectories(dag)
    if total > cap:
        raise EnumerationCapError(f"{total} trajectories exceed the cap of {cap}")
    out: list[tuple[int, ...]] = []
    path = [dag.initial]

    def walk(s: int) -> None:
        if s in dag.terminating:
            out.append(tuple(path))
            return
        for c in dag.children(s):
            path.append(c)
            walk(c)
            path.pop()

    walk(dag.initial)
    return out


def enumerate_partial_trajectories(
    dag: PointedDag, from_layer: int, to_layer: int, cap: int = TRAJECTORY_CAP
) -> list[tuple[int, ...]]:
    """All paths of a graded DAG from any state of one layer to any of a later layer."""
    if dag.layer_index is None:
        raise ValueError("partial-trajectory enumeration needs a graded DAG")
    if not 0 <= from_layer < to_layer <= max(dag.layer_index):
        raise ValueError(f"bad layer range ({from_layer}, {to_layer})")
    starts = sorted(s for s in range(dag.n_states) if dag.layer_index[s] == from_layer)
    out: list[tuple[int, ...]] = []
    path: list[int] = []

    def walk(s: int) -> None:
        if dag.layer_index[s] == to_layer:
            out.append(tuple(path))
            return
        for c in dag.children(s):
            path.append(c)
            walk(c)
            path.pop()

    for s in starts:
        path = [s]
        walk(s)
        if len(out) > cap:
            raise EnumerationCapError(f"more than {cap} partial trajectories")
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _freeze_label(x: object) -> object:
    if isinstance(x, list):
        return tuple(_freeze_label(v) for v in x)
    return x


def dag_to_json(dag: PointedDag) -> dict:
    doc: dict = {
        "states": list(dag.labels),
        "edges": [list(e) for e in dag.edges],
        "initial": dag.initial,
        "terminating": sorted(dag.terminating),
    }
    if dag.layer_index is not None:
        doc["layers"] = list(dag.layer_index)
    return doc


def dag_from_json(doc: dict) -> PointedDag:
    return PointedDag(
        labels=[_freeze_label(s) for s in doc["states"]],
        edges=[tuple(e) for e in doc["edges"]],
        initial=doc["initial"],
        terminating=doc["terminating"],
        layer_index=doc.get("layers"),
    )


def save_dag(dag: PointedDag, path: str) -> None:
    with open(path, "w") as f:
        json.dump(dag_to_json(dag), f, indent=1)


def load_dag(path: str) -> PointedDag:
    with open(path) as f:
        return dag_from_json(json.load(f))

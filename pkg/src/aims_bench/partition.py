"""Data partitioning and placement across data stores.

Objects are placed without replication.  A plan is scored by the
communication cost of every transaction's span (the largest pairwise delay
between the stores it touches) and must keep every multi-tenant transaction
distributed so its commit waits for the detector.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .workload import Transaction, Workload

AGGREGATES = ("sum", "max")


class PartitionError(Exception):
    pass


class UnassignedObjectError(PartitionError, KeyError):
    pass


class UnknownStoreError(PartitionError, KeyError):
    pass


class NoFeasiblePlanError(PartitionError):
    pass


class MalformedFileError(PartitionError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


def _pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass
class StoreGraph:
    stores: list[str]
    capacity: dict[str, int]
    delay: dict[tuple[str, str], int] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.stores)) != len(self.stores):
            raise ValueError("duplicate store id")
        self.delay = {_pair(*k): v for k, v in self.delay.items()}
        for a, b in itertools.combinations(self.stores, 2):
            if _pair(a, b) not in self.delay:
                raise ValueError(f"missing delay for {a}-{b}")
        if any(v < 0 for v in self.delay.values()):
            raise ValueError("delays must be >= 0")
        for s in self.stores:
            if self.capacity.get(s, -1) < 0:
                raise ValueError(f"store {s} needs a capacity >= 0")

    def between(self, a: str, b: str) -> int:
        if a == b:
            return 0
        try:
            return self.delay[_pair(a, b)]
        except KeyError:
            raise UnknownStoreError(f"{a}-{b}") from None

    def delay_matrix(self) -> np.ndarray:
        k = len(self.stores)
        mat = np.zeros((k, k), dtype=np.int64)
        for i, a in enumerate(self.stores):
            for j, b in enumerate(self.stores):
                if i != j:
                    mat[i, j] = self.delay[_pair(a, b)]
        return mat

    def scaled(self, factor: float) -> "StoreGraph":
        return StoreGraph(list(self.stores), dict(self.capacity),
                          {k: v * factor for k, v in self.delay.items()})


def single_store(capacity: int, name: str = "M1") -> StoreGraph:
    return StoreGraph([name], {name: capacity}, {})


def synthetic_store_graph(k: int, delay_lo: int, delay_hi: int, capacity: int,
                          seed: int) -> StoreGraph:
    """k stores with pairwise delays drawn uniformly from [delay_lo, delay_hi] ms."""
    if k < 1 or delay_lo < 0 or delay_hi < delay_lo:
        raise ValueError("need k >= 1 and 0 <= delay_lo <= delay_hi")
    rng = np.random.default_rng(seed)
    stores = [f"M{i + 1}" for i in range(k)]
    delay = {
        (a, b): int(rng.integers(delay_lo, delay_hi + 1))
        for a, b in itertools.combinations(stores, 2)
    }
    return StoreGraph(stores, {s: capacity for s in stores}, delay)


@dataclass
class PartitionPlan:
    assignment: dict[int, str]

    def store_of(self, obj: int) -> str:
        try:
            return self.assignment[obj]
        except KeyError:
            raise UnassignedObjectError(obj) from None

    def partitions(self) -> dict[str, set[int]]:
        out: dict[str, set[int]] = {}
        for o, s in self.assignment.items():
            out.setdefault(s, set()).add(o)
        return out


def span(plan: PartitionPlan, txn: Transaction) -> frozenset[str]:
    return frozenset(plan.store_of(o) for o in txn.rw_set)


def communication_cost(g: StoreGraph, stores: Iterable[str]) -> int:
    stores = sorted(set(stores))
    known = set(g.stores)
    for s in stores:
        if s not in known:
            raise UnknownStoreError(s)
    return max((g.between(a, b) for a, b in itertools.combinations(stores, 2)), default=0)


def plan_objective(plan: PartitionPlan, w: Workload, g: StoreGraph,
                   aggregate: str = "sum") -> int:
    costs = [communication_cost(g, span(plan, t)) for t in w.transactions]
    if aggregate == "sum":
        return sum(costs)
    if aggregate == "max":
        return max(costs, default=0)
    raise ValueError(f"unknown aggregate {aggregate!r}")


@dataclass(frozen=True)
class Violation:
    constraint: str  # "containment", "capacity" or "unassigned"
    subject: object  # transaction id, store id or object id
    detail: str = ""


def validate_plan(plan: PartitionPlan, w: Workload, g: StoreGraph,
                  containment: bool = True) -> list[Violation]:
    out = []
    for o in w.objects:
        if o not in plan.assignment:
            out.append(Violation("unassigned", o, "object has no store"))
    known = set(g.stores)
    if containment:
        for t in w.multi_tenant():
            stores = {plan.assignment[o] for o in t.rw_set if o in plan.assignment}
            if len(stores) <= 1:
                out.append(Violation("containment", t.id,
                                     f"multi-tenant transaction spans {sorted(stores)}"))
    counts: dict[str, int] = {}
    for o, s in plan.assignment.items():
        if s not in known:
            out.append(Violation("capacity", s, f"object {o} on unknown store"))
            continue
        counts[s] = counts.get(s, 0) + 1
    for s in g.stores:
        if counts.get(s, 0) > g.capacity[s]:
            out.append(Violation("capacity", s,
                                 f"{counts[s]} objects > capacity {g.capacity[s]}"))
    return out


class _Instance:
    """Array view of a workload for fast candidate scoring."""

    def __init__(self, w: Workload, g: StoreGraph):
        self.objects = w.objects
        self.index = {o: i for i, o in enumerate(self.objects)}
        self.k = len(g.stores)
        self.delays = g.delay_matrix()
        self.caps = np.array([g.capacity[s] for s in g.stores], dtype=np.int64)
        rows = [[self.index[o] for o in sorted(t.rw_set)] for t in w.transactions]
        width = max((len(r) for r in rows), default=1)
        self.padded = np.array([r + [r[0]] * (width - len(r)) for r in rows],
                               dtype=np.int64).reshape(len(rows), width)
        holders = np.zeros(len(self.objects), dtype=np.int64)
        for r in rows:
            holders[r] += 1
        # Repair candidates: cheapest-to-move object first.
        self.multi = [
            sorted((self.index[o] for o in t.rw_set), key=lambda i: (holders[i], i))
            for t in w.multi_tenant()
        ]
        self.multi_of: dict[int, list[int]] = {}
        for k, objs in enumerate(self.multi):
            for o in objs:
                self.multi_of.setdefault(o, []).append(k)
        self.nearest = [
            [int(j) for j in sorted(range(self.k), key=lambda j: (self.delays[i, j], j)) if j != i]
            for i in range(self.k)
        ]

    def random_assignment(self, rng: np.random.Generator) -> np.ndarray | None:
        n = len(self.objects)
        if self.caps.sum() < n:
            return None
        assign = rng.integers(0, self.k, size=n)
        counts = np.bincount(assign, minlength=self.k)
        for s in np.flatnonzero(counts > self.caps):
            on_s = np.flatnonzero(assign == s)
            for o in rng.choice(on_s, size=int(counts[s] - self.caps[s]), replace=False):
                spare = np.flatnonzero(counts < self.caps)
                dst = int(spare[rng.integers(len(spare))])
                assign[o] = dst
                counts[s] -= 1
                counts[dst] += 1
        return assign

    def _colocated(self, assign: np.ndarray, k: int) -> bool:
        objs = self.multi[k]
        first = assign[objs[0]]
        return all(assign[o] == first for o in objs)

    def _harmless(self, assign: np.ndarray, obj: int, dst: int) -> bool:
        """Moving ``obj`` to ``dst`` co-locates no other multi-tenant transaction."""
        for k in self.multi_of[obj]:
            if all(assign[o] == dst for o in self.multi[k] if o != obj):
                return False
        return True

    def repair(self, assign: np.ndarray, max_passes: int = 20) -> bool:
        """Split co-located multi-tenant transactions; True when all are split."""
        if not self.multi:
            return True
        if self.k < 2:
            return False
        counts = np.bincount(assign, minlength=self.k)
        for _ in range(max_passes):
            moved = False
            for k, objs in enumerate(self.multi):
                if not self._colocated(assign, k):
                    continue
                src = assign[objs[0]]
                moves = [(o, d) for o in objs for d in self.nearest[src]
                         if counts[d] < self.caps[d]]
                if not moves:
                    return False
                obj, dst = next((m for m in moves if self._harmless(assign, *m)), moves[0])
                assign[obj] = dst
                counts[src] -= 1
                counts[dst] += 1
                moved = True
            if not moved:
                return True
        return not any(self._colocated(assign, k) for k in range(len(self.multi)))

    def score(self, assign: np.ndarray, aggregate: str) -> int:
        if len(self.padded) == 0:
            return 0
        spans = assign[self.padded]
        costs = self.delays[spans[:, :, None], spans[:, None, :]].max(axis=(1, 2))
        return int(costs.sum() if aggregate == "sum" else costs.max())


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Per-trial stream, so trials can be evaluated in any order."""
    return np.random.default_rng([seed, trial])


def randomized_search(w: Workload, g: StoreGraph, trials: int, seed: int,
                      aggregate: str = "sum", containment: bool = True) -> PartitionPlan:
    """Best of ``trials`` random capacity-respecting plans after containment repair.

    Ties keep the earliest trial.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if aggregate not in AGGREGATES:
        raise ValueError(f"unknown aggregate {aggregate!r}")
    inst = _Instance(w, g)
    best, best_cost = None, None
    for trial in range(trials):
        assign = inst.random_assignment(trial_rng(seed, trial))
        if assign is None:
            break
        if containment and not inst.repair(assign):
            continue
        cost = inst.score(assign, aggregate)
        if best_cost is None or cost < best_cost:
            best, best_cost = assign.copy(), cost
    if best is None:
        raise NoFeasiblePlanError(f"no feasible plan in {trials} trials")
    return PartitionPlan({o: g.stores[int(s)] for o, s in zip(inst.objects, best)})


def trivial_plan(w: Workload, store: str = "M1") -> PartitionPlan:
    return PartitionPlan({o: store for o in w.objects})


# --- files -----------------------------------------------------------------

def write_store_graph(g: StoreGraph, sink: TextIO) -> None:
    sink.write(f"stores {len(g.stores)}\n")
    for s in g.stores:
        sink.write(f"cap {s} {g.capacity[s]}\n")
    for a, b in itertools.combinations(g.stores, 2):
        sink.write(f"delay {a} {b} {g.between(a, b)}\n")


def read_store_graph(source: TextIO) -> StoreGraph:
    count = None
    caps: dict[str, int] = {}
    delay: dict[tuple[str, str], int] = {}
    for lineno, line in enumerate(source, start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "stores" and len(parts) == 2:
                count = int(parts[1])
            elif parts[0] == "cap" and len(parts) == 3:
                caps[parts[1]] = int(parts[2])
            elif parts[0] == "delay" and len(parts) == 4:
                delay[_pair(parts[1], parts[2])] = int(parts[3])
            else:
                raise MalformedFileError(lineno, f"unrecognised line {line.strip()!r}")
        except ValueError:
            raise MalformedFileError(lineno, "expected an integer") from None
    if count is None:
        raise MalformedFileError(1, "missing 'stores k' line")
    if len(caps) != count:
        raise MalformedFileError(1, f"declared {count} stores, found {len(caps)} cap lines")
    try:
        return StoreGraph(list(caps), caps, delay)
    except ValueError as exc:
        raise MalformedFileError(1, str(exc)) from None


def write_plan(plan: PartitionPlan, sink: TextIO) -> None:
    for o in sorted(plan.assignment):
        sink.write(f"{o} {plan.assignment[o]}\n")


def read_plan(source: TextIO) -> PartitionPlan:
    out = {}
    for lineno, line in enumerate(source, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise MalformedFileError(lineno, "expected 'object store'")
        try:
            out[int(parts[0])] = parts[1]
        except ValueError:
            raise MalformedFileError(lineno, "object id must be an integer") from None
    return PartitionPlan(out)


"""Brute-force reference implementations.

Deliberately naive and independent of the production paths: they share
data types only.  Used by the test-suite, the acceptance run and the
``verify`` command.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from .partition import PartitionPlan, StoreGraph
from .txlog import LogRecord
from .workload import Workload


class InstanceTooLargeError(Exception):
    pass


class ProvenNoFeasiblePlanError(Exception):
    pass


@dataclass
class OracleResult:
    payload: object
    enumerated: int  # fixpoint iterations / transactions replayed / assignments tried


def _version_writers(records: Sequence[LogRecord]) -> dict[tuple[int, int], int | None]:
    """Map (object, version) to the transaction whose effect that version carries.

    Undo versions copy the value of an older version and therefore inherit
    its writer.
    """
    writer: dict[tuple[int, int], int | None] = {}
    for r in records:
        if r.kind == "undo":
            restored = None
            # Walk back to the version whose value was restored.
            v = r.cut_version - 1
            while v >= 1:
                restored = writer[(r.object, v)]
                # skip versions that were themselves nullified earlier
                if _alive_before(records, r, v):
                    break
                v -= 1
            writer[(r.object, r.version)] = restored if v >= 1 else None
        else:
            writer[(r.object, r.version)] = r.txn_id
    return writer


def _alive_before(records: Sequence[LogRecord], undo: LogRecord, v: int) -> bool:
    """Whether version ``v`` of ``undo.object`` was live right before ``undo``."""
    for r in records:
        if r.index >= undo.index:
            break
        if r.kind == "undo" and r.object == undo.object and r.cut_version <= v < r.version:
            return False
    return True


def affected_closure_bruteforce(records: Iterable[LogRecord], t_m: int) -> OracleResult:
    records = list(records)
    writer = _version_writers(records)
    reads = []  # (reader txn, writer txn of the version it read)
    for r in records:
        if r.kind != "undo":
            src = writer.get((r.object, r.version - 1)) if r.version > 1 else None
            reads.append((r.txn_id, src))
    members = {t_m}
    rounds = 0
    while True:
        rounds += 1
        grown = {reader for reader, src in reads if src in members} - members
        if not grown:
            break
        members |= grown
    return OracleResult(members - {t_m}, rounds)


def _transfer(balances: dict[int, int], txn) -> None:
    nd = len(txn.destinations)
    for src, frac in zip(txn.sources, txn.fractions):
        amount = round(Fraction(balances[src]) * Fraction(frac))
        balances[src] -= amount
        base, rem = divmod(amount, nd)
        for i, dst in enumerate(txn.destinations):
            balances[dst] += base + (i < rem)


def clean_replay(w: Workload, exclude: Iterable[int] = (),
                 order: Sequence[int] | None = None) -> OracleResult:
    """Serial replay of ``w`` in ``order`` (default: arrival order), skipping ``exclude``."""
    skip = set(exclude)
    by_id = {t.id: t for t in w.transactions}
    if order is None:
        order = [t.id for t in sorted(w.transactions, key=lambda t: (t.arrival_time, t.id))]
    balances = {a: w.spec.initial_balance for a in range(w.spec.num_accounts)}
    ran = 0
    for tid in order:
        if tid in skip:
            continue
        _transfer(balances, by_id[tid])
        ran += 1
    return OracleResult(balances, ran)


def _objective(assign: dict[int, str], w: Workload, g: StoreGraph, aggregate: str) -> int:
    total = []
    for t in w.transactions:
        stores = {assign[o] for o in t.rw_set}
        worst = 0
        for a in stores:
            for b in stores:
                if a < b:
                    worst = max(worst, g.delay[(a, b)])
        total.append(worst)
    return sum(total) if aggregate == "sum" else max(total, default=0)


def exhaustive_partition(w: Workload, g: StoreGraph, aggregate: str = "sum",
                         bound: int = 10**7) -> OracleResult:
    """Optimal plan by enumeration; ties go to the lexicographically smallest."""
    objects = w.objects
    stores = list(g.stores)
    if len(stores) ** len(objects) > bound:
        raise InstanceTooLargeError(f"{len(stores)}^{len(objects)} assignments > {bound}")
    shared = {o for o, t in w.tenant_of_object.items() if t == -1}
    multi = [t.rw_set for t in w.transactions if t.rw_set & shared]
    best, best_val, tried = None, None, 0
    for combo in itertools.product(range(len(stores)), repeat=len(objects)):
        tried += 1
        assign = {o: stores[s] for o, s in zip(objects, combo)}
        if any(len({assign[o] for o in rw}) < 2 for rw in multi):
            continue
        load = [0] * len(stores)
        for s in combo:
            load[s] += 1
        if any(load[i] > g.capacity[s] for i, s in enumerate(stores)):
            continue
        val = _objective(assign, w, g, aggregate)
        if best_val is None or val < best_val:
            best, best_val = assign, val
    if best is None:
        raise ProvenNoFeasiblePlanError(f"none of {tried} assignments is feasible")
    return OracleResult((PartitionPlan(best), best_val), tried)

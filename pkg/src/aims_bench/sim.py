"""Deterministic discrete-event execution of a workload over partitioned stores.

Transactions run atomically at their commit instant, so the history is
serial in commit order; concurrency shows up only as delay.  A transaction
whose span covers more than one store also waits for its detector verdict
before committing.
"""
from __future__ import annotations

import heapq
import io
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import TextIO

from . import aims
from .partition import (PartitionPlan, StoreGraph, communication_cost, plan_objective,
                        span, validate_plan)
from .txlog import TransactionLog
from .workload import Transaction, Workload, apply_transfer

ARRIVAL, COMMIT_READY, IDS_VERDICT, LOCK_RELEASE, RECOVERY_DONE = range(5)


class SimulationError(Exception):
    pass


class InvalidPlanError(SimulationError):
    pass


class EventQueueOverflow(SimulationError):
    pass


class IncompleteTraceError(SimulationError):
    pass


@dataclass(frozen=True)
class SimConfig:
    delta_ms: int = 500
    base_commit_ms: int = 5
    arrival_mode: str = "fixed"
    event_cap: int = 10_000_000
    lock_ms_per_txn: int = 1  # affected-set analysis time, per transaction examined
    compensate_ms: int = 5  # per undo or redo
    containment: bool = True  # reject plans that co-locate multi-tenant transactions

    def __post_init__(self):
        if self.delta_ms < 0 or self.base_commit_ms < 0:
            raise ValueError("delays must be >= 0")
        if self.lock_ms_per_txn < 0 or self.compensate_ms < 0:
            raise ValueError("recovery costs must be >= 0")
        if self.arrival_mode not in ("fixed", "poisson"):
            raise ValueError("arrival_mode must be 'fixed' or 'poisson'")
        if self.event_cap < 1:
            raise ValueError("event_cap must be >= 1")


def route(txn: Transaction, plan: PartitionPlan) -> dict[str, frozenset[int]]:
    """Split a transaction's read/write set into per-store sub-transactions."""
    parts: dict[str, set[int]] = {}
    for o in sorted(txn.rw_set):
        parts.setdefault(plan.store_of(o), set()).add(o)
    return {s: frozenset(objs) for s, objs in sorted(parts.items())}


def commit_delay(txn: Transaction, plan: PartitionPlan, g: StoreGraph, base: int) -> int:
    s = span(plan, txn)
    return base + communication_cost(g, s) if len(s) > 1 else base


@dataclass(frozen=True)
class TraceEvent:
    time: int
    kind: str
    txn: int  # -1 when not about one transaction
    detail: tuple[tuple[str, object], ...] = ()

    def get(self, key: str, default=None):
        for k, v in self.detail:
            if k == key:
                return v
        return default

    def line(self) -> str:
        parts = []
        for k, v in self.detail:
            if isinstance(v, (list, tuple, set, frozenset)):
                v = ",".join(map(str, sorted(v)))
            parts.append(f"{k}={v}")
        return f"{self.time}\t{self.kind}\t{self.txn}\t{' '.join(parts)}"


@dataclass
class Episode:
    id: int
    t_m: int
    commit_time: int
    detection_time: int
    start: int | None = None
    log_len: int | None = None  # log length when the affected set was fixed
    affected: list[int] = field(default_factory=list)
    undone: list[int] = field(default_factory=list)
    redone: list[int] = field(default_factory=list)
    corrupted: set[int] = field(default_factory=set)
    end: int | None = None


@dataclass
class Metrics:
    affected_count: int = 0
    avg_recovery_time: float = 0.0
    avg_response_time: float = 0.0
    episodes: int = 0
    blocked_count: int = 0
    plan_objective: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


class SimTrace:
    """Append-only event record plus the end state needed by the oracles."""

    def __init__(self):
        self.events: list[TraceEvent] = []
        self.complete = False
        self.balances: dict[int, int] = {}
        self.log: TransactionLog | None = None
        self.episodes: list[Episode] = []
        self.commit_order: list[int] = []

    def add(self, time: int, kind: str, txn: int = -1, **detail) -> None:
        self.events.append(TraceEvent(time, kind, txn, tuple(detail.items())))

    def of_kind(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]

    def export(self, sink: TextIO) -> None:
        for e in self.events:
            sink.write(e.line() + "\n")

    def dumps(self) -> str:
        buf = io.StringIO()
        self.export(buf)
        return buf.getvalue()


@dataclass
class _TxnState:
    admitted_at: int | None = None
    distributed: bool = False
    ready: bool = False
    verdict: bool | None = None  # None until the detector has spoken
    committed_at: int | None = None


class Simulation:
    def __init__(self, w: Workload, plan: PartitionPlan, g: StoreGraph, cfg: SimConfig):
        violations = validate_plan(plan, w, g, containment=cfg.containment)
        if violations:
            v = violations[0]
            raise InvalidPlanError(
                f"{len(violations)} violation(s); first: {v.constraint} {v.subject} {v.detail}")
        self.w, self.plan, self.g, self.cfg = w, plan, g, cfg
        self.txns = {t.id: t for t in w.transactions}
        self.store_of = dict(plan.assignment)
        self.balances = w.initial_balances()
        self.log = TransactionLog()
        self.cot = aims.CorruptedObjectsTable(self.store_of)
        self.lock = aims.RecoveryLock()
        self.blocked = aims.BlockedQueue()
        self.state = {t.id: _TxnState() for t in w.transactions}
        self.trace = SimTrace()
        self.episodes: list[Episode] = []
        self.pending: deque[Episode] = deque()
        self.active: Episode | None = None
        self.known_malicious: set[int] = set()
        self._queue: list[tuple[int, int, int, int]] = []
        self._seq = 0
        self._processed = 0

    def _schedule(self, time: int, kind: int, payload: int) -> None:
        heapq.heappush(self._queue, (time, self._seq, kind, payload))
        self._seq += 1

    def run(self) -> SimTrace:
        tr = self.trace
        tr.add(0, "PLAN", objective=plan_objective(self.plan, self.w, self.g),
               stores=len(self.g.stores))
        for t in self.w.transactions:
            self._schedule(t.arrival_time, ARRIVAL, t.id)
        now = 0
        handlers = {
            ARRIVAL: self._on_arrival,
            COMMIT_READY: self._on_commit_ready,
            IDS_VERDICT: self._on_verdict,
            LOCK_RELEASE: self._on_lock_release,
            RECOVERY_DONE: self._on_recovery_done,
        }
        while self._queue:
            self._processed += 1
            if self._processed > self.cfg.event_cap:
                raise EventQueueOverflow(f"more than {self.cfg.event_cap} events")
            time, _, kind, payload = heapq.heappop(self._queue)
            now = time
            handlers[kind](now, payload)
        if len(self.blocked) or self.active or self.pending:
            raise SimulationError("event queue drained with work outstanding")
        tr.add(now, "END")
        tr.complete = True
        tr.balances = self.balances
        tr.log = self.log
        tr.episodes = self.episodes
        return tr

    # --- admission and commit -------------------------------------------

    def _on_arrival(self, now: int, tid: int) -> None:
        self.trace.add(now, "ARRIVE", tid)
        self._try_admit(now, self.txns[tid])

    def _try_admit(self, now: int, txn: Transaction) -> None:
        decision = aims.admit(txn, self.cot, self.lock)
        if not decision:
            self.trace.add(now, "BLOCK", txn.id, reason=decision.reason)
            self.blocked.push(txn)
            return
        self._start(now, txn)

    def _start(self, now: int, txn: Transaction) -> None:
        st = self.state[txn.id]
        st.admitted_at = now
        st.distributed = len(span(self.plan, txn)) > 1
        self.trace.add(now, "ADMIT", txn.id, rw=txn.rw_set)
        delay = commit_delay(txn, self.plan, self.g, self.cfg.base_commit_ms)
        self._schedule(now + delay, COMMIT_READY, txn.id)
        verdict = aims.ids_verdict(txn, self.cfg.delta_ms, now)
        self._schedule(verdict.time, IDS_VERDICT, txn.id)

    def _drain(self, now: int) -> None:
        for txn in self.blocked.drain(self.cot, self.lock):
            self._start(now, txn)

    def _on_commit_ready(self, now: int, tid: int) -> None:
        st = self.state[tid]
        st.ready = True
        if st.distributed and st.verdict is None:
            self.trace.add(now, "HOLD", tid)
            return
        self._commit(now, tid)

    def _on_verdict(self, now: int, tid: int) -> None:
        st = self.state[tid]
        st.verdict = self.txns[tid].is_malicious
        self.trace.add(now, "VERDICT", tid, malicious=int(st.verdict))
        if st.committed_at is not None:
            if st.verdict:
                self._detect(now, tid)
        elif st.ready:
            self._commit(now, tid)
        # otherwise the commit handler picks the verdict up

    def _commit(self, now: int, tid: int) -> None:
        st = self.state[tid]
        changes = apply_transfer(self.txns[tid], self.balances)
        self.log.append_write(tid, changes, now, self.store_of)
        st.committed_at = now
        self.trace.commit_order.append(tid)
        self.trace.add(now, "COMMIT", tid)
        if st.verdict:
            self._detect(now, tid)

    # --- response and recovery ------------------------------------------

    def _detect(self, now: int, tid: int) -> None:
        ep = Episode(len(self.episodes), tid, self.state[tid].committed_at, now)
        self.episodes.append(ep)
        self.known_malicious.add(tid)
        report = aims.AttackReport(tid, ep.commit_time, now)
        marked = aims.respond(report, self.log)
        self.cot.add(marked, ep.id)
        self.trace.add(now, "RESPOND", tid, episode=ep.id, objs=marked)
        self.pending.append(ep)
        if self.active is None:
            self._begin_recovery(now)

    def _begin_recovery(self, now: int) -> None:
        ep = self.pending.popleft()
        self.active = ep
        ep.start = now
        self.lock.acquire(ep.id)
        self.trace.add(now, "LOCK", ep.t_m, episode=ep.id)
        ep.log_len = len(self.log)
        ep.affected = aims.find_affected(self.log, ep.t_m)
        self.trace.add(now, "AFFECTED", ep.t_m, episode=ep.id, txns=ep.affected)
        report = aims.AttackReport(ep.t_m, ep.commit_time, ep.detection_time)
        comp = aims.recover(self.balances, self.log, report, ep.affected, self.txns, now,
                            self.store_of, self.known_malicious)
        ep.undone, ep.redone, ep.corrupted = comp.undone, comp.redone, comp.corrupted
        # Objects actually rolled back stay quarantined until the episode ends.
        self.cot.add(comp.corrupted, ep.id)
        self.trace.add(now, "QUARANTINE", ep.t_m, episode=ep.id, objs=comp.corrupted)
        self.trace.add(now, "UNDO", ep.t_m, episode=ep.id, txns=comp.undone)
        self.trace.add(now, "REDO", ep.t_m, episode=ep.id, txns=comp.redone)
        hold = self.cfg.lock_ms_per_txn * (1 + len(ep.affected))
        self._schedule(now + hold, LOCK_RELEASE, ep.id)

    def _on_lock_release(self, now: int, eid: int) -> None:
        ep = self.episodes[eid]
        self.lock.release()
        self.trace.add(now, "UNLOCK", ep.t_m, episode=eid)
        clean = self.cot.owned_by(eid) - ep.corrupted
        self.cot.remove(clean)
        self.trace.add(now, "RELEASE", ep.t_m, episode=eid, objs=clean)
        self._drain(now)
        work = self.cfg.compensate_ms * (len(ep.undone) + len(ep.redone))
        self._schedule(now + work, RECOVERY_DONE, eid)

    def _on_recovery_done(self, now: int, eid: int) -> None:
        ep = self.episodes[eid]
        ep.end = now
        cleared = self.cot.release_episode(eid)
        self.trace.add(now, "RECOVERED", ep.t_m, episode=eid, detected=ep.detection_time,
                       undone=len(ep.undone), redone=len(ep.redone), cleared=cleared)
        self.active = None
        if self.pending:
            self._begin_recovery(now)
        self._drain(now)


def run_simulation(w: Workload, plan: PartitionPlan, g: StoreGraph, cfg: SimConfig,
                   seed: int = 0) -> tuple[SimTrace, Metrics]:
    """Run ``w`` to completion.

    ``seed`` is accepted for interface symmetry; the engine itself draws no
    random numbers, all randomness lives in the workload and the plan.
    """
    trace = Simulation(w, plan, g, cfg).run()
    return trace, compute_metrics(trace)


def compute_metrics(trace: SimTrace) -> Metrics:
    if not trace.events or trace.events[-1].kind != "END":
        raise IncompleteTraceError("trace has no END event")
    arrived: dict[int, int] = {}
    committed: dict[int, int] = {}
    blocked: set[int] = set()
    recoveries = []
    affected = 0
    objective = 0
    for e in trace.events:
        if e.kind == "ARRIVE":
            arrived[e.txn] = e.time
        elif e.kind == "COMMIT":
            committed.setdefault(e.txn, e.time)
        elif e.kind == "BLOCK":
            blocked.add(e.txn)
        elif e.kind == "RECOVERED":
            recoveries.append(e.time - e.get("detected"))
            affected += e.get("redone")
        elif e.kind == "PLAN":
            objective = e.get("objective")
    if set(arrived) != set(committed):
        raise IncompleteTraceError("some arrived transactions never committed")
    responses = [committed[t] - arrived[t] for t in committed]
    return Metrics(
        affected_count=affected,
        avg_recovery_time=sum(recoveries) / len(recoveries) if recoveries else 0.0,
        avg_response_time=sum(responses) / len(responses) if responses else 0.0,
        episodes=len(recoveries),
        blocked_count=len(blocked),
        plan_objective=objective,
    )


def audit_admissions(trace: SimTrace) -> list[str]:
    """Replay COT and lock state from the trace; report unsafe admissions."""
    cot: set[int] = set()
    locked = False
    problems = []
    for e in trace.events:
        if e.kind in ("RESPOND", "QUARANTINE"):
            cot.update(e.get("objs"))
        elif e.kind == "RELEASE":
            cot.difference_update(e.get("objs"))
        elif e.kind == "RECOVERED":
            cot.difference_update(e.get("cleared"))
        elif e.kind == "LOCK":
            locked = True
        elif e.kind == "UNLOCK":
            locked = False
        elif e.kind == "ADMIT":
            if locked:
                problems.append(f"t={e.time}: txn {e.txn} admitted under recovery lock")
            hit = cot & set(e.get("rw"))
            if hit:
                problems.append(f"t={e.time}: txn {e.txn} admitted touching COT {sorted(hit)}")
    if cot:
        problems.append(f"COT not empty at end: {sorted(cot)}")
    return problems

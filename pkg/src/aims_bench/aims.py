"""Intrusion management: admission gate, damage marking and single-pass recovery."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Collection, Iterable, Mapping

from .txlog import REDO, TransactionLog
from .workload import Transaction, apply_transfer


class AimsError(Exception):
    pass


class UnknownTransactionError(AimsError):
    pass


class MissingVersionError(AimsError):
    """The log no longer holds what recovery needs; state is unrecoverable."""


class CorruptedObjectsTable:
    """Quarantined objects, sharded per data store.

    Each entry carries the recovery episode that owns it.  An object is
    owned by at most one episode; re-marking hands it to the later episode
    since episodes finish in detection order.
    """

    def __init__(self, store_of: Mapping[int, str] | None = None):
        self._store_of = store_of or {}
        self.shards: dict[str, dict[int, int]] = {}
        self._owner: dict[int, int] = {}

    def _store(self, obj: int) -> str:
        return self._store_of.get(obj, "?")

    def add(self, objs: Iterable[int], episode: int) -> set[int]:
        """Mark ``objs`` for ``episode``; returns the newly quarantined ones."""
        new = set()
        for o in objs:
            cur = self._owner.get(o)
            if cur is None:
                new.add(o)
            if cur is None or cur < episode:
                self._owner[o] = episode
                self.shards.setdefault(self._store(o), {})[o] = episode
        return new

    def remove(self, objs: Iterable[int]) -> set[int]:
        gone = set()
        for o in objs:
            if self._owner.pop(o, None) is not None:
                del self.shards[self._store(o)][o]
                gone.add(o)
        return gone

    def owned_by(self, episode: int) -> set[int]:
        return {o for o, e in self._owner.items() if e == episode}

    def release_episode(self, episode: int) -> set[int]:
        return self.remove(self.owned_by(episode))

    def intersects(self, objs: Iterable[int]) -> bool:
        return any(o in self._owner for o in objs)

    def owner(self, obj: int) -> int | None:
        return self._owner.get(obj)

    def __contains__(self, obj: int) -> bool:
        return obj in self._owner

    def __len__(self) -> int:
        return len(self._owner)

    def objects(self) -> set[int]:
        return set(self._owner)


@dataclass
class RecoveryLock:
    held: bool = False
    holder: int | None = None

    def acquire(self, episode: int) -> None:
        if self.held:
            raise AimsError(f"recovery lock already held by episode {self.holder}")
        self.held, self.holder = True, episode

    def release(self) -> None:
        self.held, self.holder = False, None


@dataclass(frozen=True)
class AttackReport:
    malicious_txn: int
    commit_time: int
    detection_time: int

    def __post_init__(self):
        if self.detection_time < self.commit_time:
            raise ValueError("detection cannot precede commit")


@dataclass(frozen=True)
class Admission:
    admitted: bool
    reason: str = ""

    def __bool__(self):
        return self.admitted


def admit(txn: Transaction, cot: CorruptedObjectsTable, lock: RecoveryLock) -> Admission:
    if lock.held:
        return Admission(False, f"recovery-lock:{lock.holder}")
    hits = sorted(o for o in txn.rw_set if o in cot)
    if hits:
        return Admission(False, "cot:" + ",".join(map(str, hits)))
    return Admission(True)


class BlockedQueue:
    """FIFO of transactions waiting at the admission gate."""

    def __init__(self):
        self._q: deque[Transaction] = deque()

    def push(self, txn: Transaction) -> None:
        self._q.append(txn)

    def drain(self, cot: CorruptedObjectsTable, lock: RecoveryLock) -> list[Transaction]:
        """Pop, in arrival order, every waiting transaction that may now run."""
        if lock.held:
            return []
        ready, keep = [], deque()
        for t in self._q:
            (ready if admit(t, cot, lock) else keep).append(t)
        self._q = keep
        return ready

    def __len__(self):
        return len(self._q)


def respond(report: AttackReport, log: TransactionLog) -> set[int]:
    """Objects written in the closed interval [commit, detection]."""
    if report.malicious_txn not in log.first_commit:
        raise UnknownTransactionError(f"transaction {report.malicious_txn} has no log records")
    return {r.object for r in log.between(report.commit_time, report.detection_time)}


def find_affected(log: TransactionLog, t_m: int) -> list[int]:
    """Transitive read-from closure of ``t_m``, in first-commit order."""
    seen = {t_m}
    frontier = [t_m]
    while frontier:
        w = frontier.pop()
        for r in log.readers.get(w, ()):
            if r not in seen:
                seen.add(r)
                frontier.append(r)
    seen.discard(t_m)
    return sorted(seen, key=log.first_commit.__getitem__)


@dataclass
class Compensation:
    undone: list[int]  # t_m and affected transactions with live effects
    redone: list[int]
    corrupted: set[int]  # objects rolled back
    skipped: list[int] = field(default_factory=list)  # known-malicious, not redone


def recover(balances: dict[int, int], log: TransactionLog, report: AttackReport,
            affected: list[int], transactions: Mapping[int, Transaction], now: int,
            store_of: Mapping[int, str], known_malicious: Collection[int] = ()) -> Compensation:
    """Undo ``t_m`` and ``affected``, then redo the affected ones in commit order.

    Each object is rolled back to the newest live version whose effect does
    not stem from an invalid transaction.  Invalid versions always form a
    suffix of the live chain because every write reads its predecessor.
    """
    t_m = report.malicious_txn
    if t_m not in log.records_of:
        raise MissingVersionError(f"no log records for malicious transaction {t_m}")
    invalid = {t_m, *affected}

    touched: set[int] = set()
    for t in invalid:
        touched.update(log.records[i].object for i in log.records_of.get(t, ()))
    corrupted = set()
    undone = set()
    for obj in sorted(touched):
        chain = log.live.get(obj, [])
        cut = len(chain)
        while cut > 0 and log.records[chain[cut - 1]].writer in invalid:
            cut -= 1
        if cut == len(chain):
            continue
        undone.update(log.records[i].writer for i in chain[cut:])
        rec = log.append_undo(obj, cut, now, store_of[obj])
        balances[obj] = rec.new_value
        corrupted.add(obj)

    skip = set(known_malicious) | {t_m}
    redone = []
    for t in affected:
        if t in skip:
            continue
        changes = apply_transfer(transactions[t], balances)
        log.append_write(t, changes, now, store_of, REDO)
        redone.append(t)
    order = sorted(undone, key=log.first_commit.__getitem__)
    return Compensation(order, redone, corrupted,
                        [t for t in affected if t in skip])


@dataclass(frozen=True)
class Verdict:
    txn_id: int
    time: int
    malicious: bool


def ids_verdict(txn: Transaction, delta: int, commit_request_time: int) -> Verdict:
    """Perfect but delayed detector."""
    if delta < 0:
        raise ValueError("detection delay must be >= 0")
    return Verdict(txn.id, commit_request_time + delta, txn.is_malicious)

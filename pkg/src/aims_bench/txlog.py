"""Versioned, append-only record of every committed write."""
from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Iterable, Mapping

EXEC, REDO, UNDO = "exec", "redo", "undo"


class LogIntegrityError(Exception):
    pass


@dataclass(frozen=True)
class LogRecord:
    index: int
    txn_id: int | None  # None for compensation (undo) writes
    object: int
    old_value: int
    new_value: int
    version: int
    commit_time: int
    store: str
    kind: str = EXEC
    # For undo records: the transaction whose version was restored
    # (None means the initial balance).
    source_txn: int | None = None
    # For undo records: version of the first record the undo nullified.
    cut_version: int = 0

    @property
    def writer(self) -> int | None:
        """Transaction whose effect this version carries."""
        return self.source_txn if self.kind == UNDO else self.txn_id


class TransactionLog:
    """Append-only log with the indexes recovery needs.

    ``live[o]`` lists the record indices currently contributing to object
    ``o``'s value; an undo truncates it and appends the compensation record.
    ``readers[w]`` holds every transaction that read a version carrying
    ``w``'s effect.
    """

    def __init__(self):
        self.records: list[LogRecord] = []
        self._times: list[int] = []
        self.live: dict[int, list[int]] = {}
        self.readers: dict[int | None, set[int]] = {}
        self.records_of: dict[int, list[int]] = {}
        self.first_commit: dict[int, int] = {}  # txn -> index of first record

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def version(self, obj: int) -> int:
        chain = self.live.get(obj)
        return self.records[chain[-1]].version if chain else 0

    def last(self, obj: int) -> LogRecord | None:
        chain = self.live.get(obj)
        return self.records[chain[-1]] if chain else None

    def _append(self, rec: LogRecord, prev: LogRecord | None) -> LogRecord:
        if self._times and rec.commit_time < self._times[-1]:
            raise LogIntegrityError("commit times must be non-decreasing")
        if prev is not None:
            if rec.old_value != prev.new_value:
                raise LogIntegrityError(f"broken value chain on object {rec.object}")
            if rec.version != prev.version + 1:
                raise LogIntegrityError(f"version gap on object {rec.object}")
        elif rec.version != 1:
            raise LogIntegrityError(f"first version of object {rec.object} must be 1")
        if rec.kind != UNDO:
            writer = self.last(rec.object).writer if rec.object in self.live else None
            if writer != rec.txn_id:
                self.readers.setdefault(writer, set()).add(rec.txn_id)
            self.records_of.setdefault(rec.txn_id, []).append(rec.index)
            self.first_commit.setdefault(rec.txn_id, rec.index)
        self.records.append(rec)
        self._times.append(rec.commit_time)
        self.live.setdefault(rec.object, []).append(rec.index)
        return rec

    def append_write(self, txn_id: int, changes: Mapping[int, tuple[int, int]], time: int,
                     store_of: Mapping[int, str], kind: str = EXEC) -> list[LogRecord]:
        out = []
        for obj in sorted(changes):
            old, new = changes[obj]
            prev = self.last(obj)
            out.append(self._append(LogRecord(
                len(self.records), txn_id, obj, old, new,
                prev.version + 1 if prev else 1, time, store_of[obj], kind,
            ), prev))
        return out

    def append_undo(self, obj: int, cut: int, time: int, store: str) -> LogRecord:
        """Nullify ``live[obj][cut:]`` and write the compensating version."""
        chain = self.live[obj]
        if cut > 0:
            base = self.records[chain[cut - 1]]
            value, source = base.new_value, base.writer
        else:
            value, source = self.records[chain[0]].old_value, None
        current = self.records[chain[-1]]
        first_cut = self.records[chain[cut]]
        rec = LogRecord(len(self.records), None, obj, current.new_value, value,
                        current.version + 1, time, store, UNDO, source,
                        first_cut.version)
        del chain[cut:]
        return self._append(rec, current)

    def commit_time_of(self, txn_id: int) -> int | None:
        idx = self.first_commit.get(txn_id)
        return None if idx is None else self.records[idx].commit_time

    def between(self, t0: int, t1: int) -> list[LogRecord]:
        """Records with ``t0 <= commit_time <= t1``."""
        lo = bisect.bisect_left(self._times, t0)
        hi = bisect.bisect_right(self._times, t1)
        return self.records[lo:hi]

    @classmethod
    def from_records(cls, records: Iterable[LogRecord]) -> "TransactionLog":
        log = cls()
        for rec in records:
            if rec.kind == UNDO:
                chain = log.live.get(rec.object, [])
                cut = next((k for k, i in enumerate(chain)
                            if log.records[i].version == rec.cut_version), None)
                if cut is None:
                    raise LogIntegrityError(f"undo record {rec.index} cuts an unknown version")
                log.append_undo(rec.object, cut, rec.commit_time, rec.store)
            else:
                log.append_write(rec.txn_id, {rec.object: (rec.old_value, rec.new_value)},
                                 rec.commit_time, {rec.object: rec.store}, rec.kind)
        return log

    def prefix(self, k: int) -> "TransactionLog":
        return TransactionLog.from_records(self.records[:k])

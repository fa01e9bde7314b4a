"""Malicious-transaction benchmark: money transfers over a single Checking table.

A workload is ``n`` transfer transactions whose inter-transaction dependencies
follow an Erdos-Renyi graph.  Adjacent transactions are forced to share at
least one account; everything else gets private accounts.
"""
from __future__ import annotations

import enum
import functools
import io
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Iterator, Mapping, Sequence, TextIO

import numpy as np

SHARED = -1  # tenant marker for accounts used by more than one tenant

FRACTION_SCALE = 10_000  # fractions are drawn on a 1e-4 grid
MIN_FRACTION = Fraction(1, 100)
MAX_FRACTION = Fraction(1, 10)


class WorkloadError(Exception):
    pass


class InfeasibleAssignmentError(WorkloadError):
    """Not enough accounts to honour both sharing and disjointness."""


class MalformedWorkloadError(WorkloadError):
    def __init__(self, lineno: int, field_name: str, message: str):
        self.lineno = lineno
        self.field_name = field_name
        super().__init__(f"line {lineno}, field {field_name!r}: {message}")


class Kind(enum.Enum):
    DISTRIBUTE = "distribute"
    COLLECT = "collect"
    MANY_TO_MANY = "many_to_many"


@dataclass(frozen=True)
class WorkloadSpec:
    n: int = 100
    alpha: int = 10
    beta: float = 0.5
    num_accounts: int = 2000
    initial_balance: int = 1_000_000  # cents
    arrival_rate: float = 10.0  # transactions per second
    m: int = 0
    num_tenants: int = 4
    arrival_mode: str = "fixed"

    def __post_init__(self):
        problems = []
        if self.n < 0:
            problems.append("n must be >= 0")
        if self.alpha < 2:
            problems.append("alpha must be >= 2")
        if not 0.0 <= self.beta <= 1.0:
            problems.append("beta must lie in [0, 1]")
        if not 0 <= self.m <= self.n:
            problems.append("m must lie in [0, n]")
        if self.num_accounts < self.alpha + 1:
            problems.append("num_accounts must be >= alpha + 1")
        if self.num_tenants < 1:
            problems.append("num_tenants must be >= 1")
        if self.initial_balance < 0:
            problems.append("initial_balance must be >= 0")
        if self.arrival_rate <= 0:
            problems.append("arrival_rate must be > 0")
        if self.arrival_mode not in ("fixed", "poisson"):
            problems.append("arrival_mode must be 'fixed' or 'poisson'")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class Transaction:
    id: int
    kind: Kind
    sources: tuple[int, ...]
    destinations: tuple[int, ...]
    fractions: tuple[Fraction, ...]  # one per source
    tenant: int
    is_malicious: bool = False
    arrival_time: int = 0  # ms

    @property
    def rw_set(self) -> frozenset[int]:
        return frozenset(self.sources) | frozenset(self.destinations)

    @property
    def fan_degree(self) -> int:
        return max(len(self.sources), len(self.destinations))

    def check(self, alpha: int | None = None) -> list[str]:
        """Return the list of broken structural invariants (empty when sound)."""
        errs = []
        ns, nd = len(self.sources), len(self.destinations)
        if self.kind is Kind.DISTRIBUTE and not (ns == 1 and nd >= 2):
            errs.append("distribute needs 1 source and >=2 destinations")
        if self.kind is Kind.COLLECT and not (ns >= 2 and nd == 1):
            errs.append("collect needs >=2 sources and 1 destination")
        if self.kind is Kind.MANY_TO_MANY and not (ns >= 2 and nd >= 2):
            errs.append("many-to-many needs >=2 sources and >=2 destinations")
        if alpha is not None and max(ns, nd) > alpha:
            errs.append(f"fan degree exceeds alpha={alpha}")
        if len(set(self.sources)) != ns or len(set(self.destinations)) != nd:
            errs.append("duplicate account within an endpoint list")
        if set(self.sources) & set(self.destinations):
            errs.append("sources and destinations overlap")
        if len(self.fractions) != ns:
            errs.append("need exactly one fraction per source")
        if any(not MIN_FRACTION <= f <= MAX_FRACTION for f in self.fractions):
            errs.append("fraction outside [0.01, 0.1]")
        return errs


class DependencyGraph:
    """Simple undirected graph on ``0..n-1`` stored as upper-triangular rows.

    ``rows[i]`` holds the sorted neighbours ``j > i``.  Dense graphs at
    n=5000 have millions of edges, so rows are numpy arrays, not tuples.
    """

    def __init__(self, n: int, rows: Sequence[np.ndarray] | None = None):
        self.n = n
        if rows is None:
            rows = [np.empty(0, dtype=np.int32) for _ in range(n)]
        if len(rows) != n:
            raise ValueError("need one neighbour row per node")
        self.rows = [np.asarray(r, dtype=np.int32) for r in rows]

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "DependencyGraph":
        upper: list[set[int]] = [set() for _ in range(n)]
        for i, j in edges:
            if i == j:
                raise ValueError("self-loop")
            i, j = min(i, j), max(i, j)
            upper[i].add(j)
        return cls(n, [np.array(sorted(s), dtype=np.int32) for s in upper])

    @property
    def num_edges(self) -> int:
        return int(sum(len(r) for r in self.rows))

    def edges(self) -> Iterator[tuple[int, int]]:
        for i, row in enumerate(self.rows):
            for j in row.tolist():
                yield i, j

    def has_edge(self, i: int, j: int) -> bool:
        i, j = min(i, j), max(i, j)
        row = self.rows[i]
        k = int(np.searchsorted(row, j))
        return k < len(row) and int(row[k]) == j

    def __eq__(self, other):
        if not isinstance(other, DependencyGraph):
            return NotImplemented
        return self.n == other.n and all(
            np.array_equal(a, b) for a, b in zip(self.rows, other.rows)
        )

    def __repr__(self):
        return f"DependencyGraph(n={self.n}, edges={self.num_edges})"


@dataclass(frozen=True)
class Workload:
    spec: WorkloadSpec
    transactions: tuple[Transaction, ...]
    dependency_graph: DependencyGraph
    tenant_of_object: Mapping[int, int] = field(default_factory=dict)

    @property
    def objects(self) -> list[int]:
        """Accounts touched by at least one transaction, ascending."""
        return sorted(self.tenant_of_object)

    def multi_tenant(self) -> list[Transaction]:
        """Transactions touching a shared account."""
        shared = {o for o, t in self.tenant_of_object.items() if t == SHARED}
        return [t for t in self.transactions if not shared.isdisjoint(t.rw_set)]

    def initial_balances(self) -> dict[int, int]:
        return {a: self.spec.initial_balance for a in range(self.spec.num_accounts)}

    @property
    def malicious_ids(self) -> list[int]:
        return [t.id for t in self.transactions if t.is_malicious]


def _rngs(seed: int) -> list[np.random.Generator]:
    # Independent streams so that changing m never perturbs structure.
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def build_dependency_graph(n: int, beta: float, seed: int) -> DependencyGraph:
    if n < 0 or not 0.0 <= beta <= 1.0:
        raise ValueError("need n >= 0 and 0 <= beta <= 1")
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        draws = rng.random(n - i - 1)
        rows.append((np.flatnonzero(draws < beta) + i + 1).astype(np.int32))
    return DependencyGraph(n, rows)


def round_half_even(x: Fraction) -> int:
    return round(x)  # Fraction.__round__ is banker's rounding


def transfer_deltas(txn: Transaction, balances: Mapping[int, int]) -> dict[int, int]:
    """Per-account balance change produced by running ``txn`` on ``balances``.

    Each source sends ``round(balance * fraction)``; the amount is split
    evenly over the destinations with the remainder going to the first ones.
    """
    deltas = {a: 0 for a in txn.sources + txn.destinations}
    nd = len(txn.destinations)
    for src, frac in zip(txn.sources, txn.fractions):
        amount = round_half_even(balances[src] * frac)
        deltas[src] -= amount
        share, extra = divmod(amount, nd)
        for k, dst in enumerate(txn.destinations):
            deltas[dst] += share + (1 if k < extra else 0)
    return deltas


def apply_transfer(txn: Transaction, balances: dict[int, int]) -> dict[int, tuple[int, int]]:
    """Apply ``txn`` in place; returns ``{account: (old, new)}``."""
    changes = {}
    for acct, d in transfer_deltas(txn, balances).items():
        old = balances[acct]
        balances[acct] = old + d
        changes[acct] = (old, old + d)
    return changes


class _SlotTable:
    """Endpoint slots of every transaction while accounts are being wired."""

    def __init__(self, src_counts: list[int], dst_counts: list[int]):
        self.src = [[None] * c for c in src_counts]
        self.dst = [[None] * c for c in dst_counts]
        self.accts: list[set[int]] = [set() for _ in src_counts]
        self.holders: dict[int, set[int]] = {}
        self.next_id = 0

    def free(self, t: int) -> bool:
        return None in self.src[t] or None in self.dst[t]

    def put(self, t: int, acct: int) -> None:
        # Fill the emptier side first so both roles get used.
        src_free = self.src[t].count(None)
        dst_free = self.dst[t].count(None)
        side = self.src[t] if src_free >= dst_free and src_free else self.dst[t]
        side[side.index(None)] = acct
        self.accts[t].add(acct)
        self.holders.setdefault(acct, set()).add(t)

    def fresh(self) -> int:
        self.next_id += 1
        return self.next_id - 1

    def merge(self, keep: int, drop: int) -> None:
        # A holder of both accounts just frees the duplicate slot; it is
        # refilled later.  Sharing relations only ever grow.
        for t in self.holders.pop(drop):
            for side in (self.src[t], self.dst[t]):
                if drop in side:
                    side[side.index(drop)] = None if keep in self.accts[t] else keep
            self.accts[t].discard(drop)
            self.accts[t].add(keep)
            self.holders[keep].add(t)

    def _least_held(self, accts: set[int]) -> int:
        return min(accts, key=lambda a: (len(self.holders[a]), a))

    def connect(self, i: int, j: int) -> None:
        ai, aj = self.accts[i], self.accts[j]
        if not ai.isdisjoint(aj):
            return
        fi, fj = self.free(i), self.free(j)
        if fi and fj:
            a = self.fresh()
            self.put(i, a)
            self.put(j, a)
        elif fj:
            self.put(j, self._least_held(ai))
        elif fi:
            self.put(i, self._least_held(aj))
        else:
            h = self.holders
            keep, drop = min(
                ((a, b) for a in ai for b in aj),
                key=lambda p: (len(h[p[0]] | h[p[1]]), p),
            )
            self.merge(keep, drop)


@functools.lru_cache(maxsize=8)
def _structure(n: int, alpha: int, beta: float, num_accounts: int, num_tenants: int,
               seed: int) -> tuple[tuple[Transaction, ...], DependencyGraph]:
    graph_rng, shape_rng, _, _ = _rngs(seed)
    graph = build_dependency_graph(n, beta, int(graph_rng.integers(2**63)))

    kinds = [list(Kind)[k] for k in shape_rng.integers(0, 3, size=n)]
    src_counts, dst_counts = [], []
    for kind in kinds:
        if kind is Kind.DISTRIBUTE:
            src_counts.append(1)
            dst_counts.append(int(shape_rng.integers(2, alpha + 1)))
        elif kind is Kind.COLLECT:
            src_counts.append(int(shape_rng.integers(2, alpha + 1)))
            dst_counts.append(1)
        else:
            src_counts.append(int(shape_rng.integers(2, alpha + 1)))
            dst_counts.append(int(shape_rng.integers(2, alpha + 1)))

    slots = _SlotTable(src_counts, dst_counts)
    for i, row in enumerate(graph.rows):
        for j in row.tolist():
            slots.connect(i, j)
    for t in range(n):
        while slots.free(t):
            slots.put(t, slots.fresh())

    # Compact account ids in order of first use.
    relabel: dict[int, int] = {}
    for t in range(n):
        for a in slots.src[t] + slots.dst[t]:
            relabel.setdefault(a, len(relabel))
    if len(relabel) > num_accounts:
        raise InfeasibleAssignmentError(
            f"workload needs {len(relabel)} accounts but num_accounts={num_accounts}"
        )

    txns = []
    for t in range(n):
        fracs = tuple(
            Fraction(int(v), FRACTION_SCALE)
            for v in shape_rng.integers(100, 1001, size=src_counts[t])
        )
        txns.append(Transaction(
            id=t,
            kind=kinds[t],
            sources=tuple(relabel[a] for a in slots.src[t]),
            destinations=tuple(relabel[a] for a in slots.dst[t]),
            fractions=fracs,
            tenant=t % num_tenants,
        ))
    return tuple(txns), graph


def tenant_map(transactions: Iterable[Transaction]) -> dict[int, int]:
    owner: dict[int, int] = {}
    for t in transactions:
        for a in t.rw_set:
            prev = owner.get(a, t.tenant)
            owner[a] = prev if prev == t.tenant else SHARED
    return dict(sorted(owner.items()))


def arrival_times(n: int, rate: float, mode: str, seed: int) -> list[int]:
    gap = 1000.0 / rate
    if mode == "fixed":
        return [int(round(i * gap)) for i in range(n)]
    rng = _rngs(seed)[3]
    if n == 0:
        return []
    gaps = rng.exponential(gap, size=n)
    gaps[0] = 0.0
    return [int(round(x)) for x in np.cumsum(gaps)]


def choose_malicious(n: int, m: int, seed: int) -> set[int]:
    # Prefix of one fixed permutation: malicious sets are nested in m.
    order = _rngs(seed)[2].permutation(n)
    return set(order[:m].tolist())


def generate_workload(spec: WorkloadSpec, seed: int) -> Workload:
    txns, graph = _structure(spec.n, spec.alpha, spec.beta, spec.num_accounts,
                             spec.num_tenants, seed)
    bad = choose_malicious(spec.n, spec.m, seed)
    times = arrival_times(spec.n, spec.arrival_rate, spec.arrival_mode, seed)
    txns = tuple(
        replace(t, is_malicious=t.id in bad, arrival_time=times[t.id]) for t in txns
    )
    return Workload(spec, txns, graph, tenant_map(txns))


def with_malicious(w: Workload, m: int, seed: int) -> Workload:
    """Same workload with a fresh malicious selection of size ``m``."""
    spec = replace(w.spec, m=m)
    bad = choose_malicious(spec.n, m, seed)
    txns = tuple(replace(t, is_malicious=t.id in bad) for t in w.transactions)
    return Workload(spec, txns, w.dependency_graph, w.tenant_of_object)


# --- text format -----------------------------------------------------------

_HEADER_FIELDS = [
    ("n", int), ("alpha", int), ("beta", float), ("num_accounts", int),
    ("initial_balance", int), ("arrival_rate", float), ("m", int),
    ("num_tenants", int), ("arrival_mode", str),
]
_KIND_CODES = {Kind.DISTRIBUTE: "D", Kind.COLLECT: "C", Kind.MANY_TO_MANY: "M"}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def _fmt_frac(f: Fraction) -> str:
    return f"{float(f):.4f}"


def write_workload(w: Workload, sink: TextIO) -> None:
    sink.write(" ".join(f"{k}={getattr(w.spec, k)!r}" if typ is float
                        else f"{k}={getattr(w.spec, k)}"
                        for k, typ in _HEADER_FIELDS) + "\n")
    for t in w.transactions:
        deps = ",".join(map(str, w.dependency_graph.rows[t.id].tolist()))
        sink.write(
            f"{t.id} {_KIND_CODES[t.kind]}"
            f" src={','.join(map(str, t.sources))}"
            f" dst={','.join(map(str, t.destinations))}"
            f" frac={','.join(_fmt_frac(f) for f in t.fractions)}"
            f" tenant=T{t.tenant} mal={int(t.is_malicious)} at={t.arrival_time}"
            f" dep={deps}\n"
        )


def dumps_workload(w: Workload) -> str:
    buf = io.StringIO()
    write_workload(w, buf)
    return buf.getvalue()


def _int_list(lineno: int, name: str, text: str, allow_empty: bool = False) -> list[int]:
    if not text:
        if allow_empty:
            return []
        raise MalformedWorkloadError(lineno, name, "empty list")
    try:
        vals = [int(x) for x in text.split(",")]
    except ValueError:
        raise MalformedWorkloadError(lineno, name, f"bad integer list {text!r}") from None
    if any(v < 0 for v in vals):
        raise MalformedWorkloadError(lineno, name, "negative id")
    return vals


def read_workload(source: TextIO) -> Workload:
    lines = source.read().splitlines()
    if not lines:
        raise MalformedWorkloadError(1, "header", "missing header line")
    header: dict[str, object] = {}
    for tok in lines[0].split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise MalformedWorkloadError(1, tok, "expected key=value")
        header[key] = val
    kwargs = {}
    for key, typ in _HEADER_FIELDS:
        if key not in header:
            raise MalformedWorkloadError(1, key, "missing header field")
        try:
            kwargs[key] = typ(header.pop(key))
        except ValueError:
            raise MalformedWorkloadError(1, key, "bad value") from None
    if header:
        raise MalformedWorkloadError(1, next(iter(header)), "unknown header field")
    try:
        spec = WorkloadSpec(**kwargs)
    except ValueError as exc:
        raise MalformedWorkloadError(1, "header", str(exc)) from None

    order = ["src", "dst", "frac", "tenant", "mal", "at", "dep"]
    txns, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(" ")
        if len(parts) != 2 + len(order):
            raise MalformedWorkloadError(lineno, "line", f"expected {2 + len(order)} fields")
        try:
            tid = int(parts[0])
        except ValueError:
            raise MalformedWorkloadError(lineno, "id", "not an integer") from None
        if tid != len(txns):
            raise MalformedWorkloadError(lineno, "id", f"expected id {len(txns)}")
        if parts[1] not in _CODE_KINDS:
            raise MalformedWorkloadError(lineno, "kind", f"unknown kind {parts[1]!r}")
        vals = {}
        for name, tok in zip(order, parts[2:]):
            key, sep, val = tok.partition("=")
            if key != name or not sep:
                raise MalformedWorkloadError(lineno, name, f"expected {name}=...")
            vals[name] = val
        src = _int_list(lineno, "src", vals["src"])
        dst = _int_list(lineno, "dst", vals["dst"])
        try:
            fracs = tuple(Fraction(x) for x in vals["frac"].split(","))
        except (ValueError, ZeroDivisionError):
            raise MalformedWorkloadError(lineno, "frac", "bad fraction") from None
        if not vals["tenant"].startswith("T") or not vals["tenant"][1:].isdigit():
            raise MalformedWorkloadError(lineno, "tenant", "expected T<k>")
        if vals["mal"] not in ("0", "1"):
            raise MalformedWorkloadError(lineno, "mal", "expected 0 or 1")
        try:
            at = int(vals["at"])
        except ValueError:
            raise MalformedWorkloadError(lineno, "at", "not an integer") from None
        deps = _int_list(lineno, "dep", vals["dep"], allow_empty=True)
        if any(d <= tid or d >= spec.n for d in deps) or deps != sorted(set(deps)):
            raise MalformedWorkloadError(lineno, "dep", "neighbours must be sorted ids > own id")
        txn = Transaction(tid, _CODE_KINDS[parts[1]], tuple(src), tuple(dst), fracs,
                          int(vals["tenant"][1:]), vals["mal"] == "1", at)
        errs = txn.check(spec.alpha)
        if errs:
            raise MalformedWorkloadError(lineno, "transaction", "; ".join(errs))
        if any(a >= spec.num_accounts for a in txn.rw_set):
            raise MalformedWorkloadError(lineno, "src/dst", "account id >= num_accounts")
        txns.append(txn)
        rows.append(np.array(deps, dtype=np.int32))
    if len(txns) != spec.n:
        raise MalformedWorkloadError(len(lines) + 1, "n", f"header says n={spec.n}, found {len(txns)}")
    if sum(t.is_malicious for t in txns) != spec.m:
        raise MalformedWorkloadError(1, "m", "malicious count does not match header")
    txns = tuple(txns)
    return Workload(spec, txns, DependencyGraph(spec.n, rows), tenant_map(txns))


def loads_workload(text: str) -> Workload:
    return read_workload(io.StringIO(text))

import pytest

from aims_bench.partition import randomized_search, single_store, synthetic_store_graph, trivial_plan
from aims_bench.sim import SimConfig, run_simulation
from aims_bench.workload import WorkloadSpec, generate_workload


def small_spec(**kw) -> WorkloadSpec:
    base = dict(n=60, alpha=5, beta=0.05, num_accounts=1500, arrival_rate=50.0, m=0)
    base.update(kw)
    return WorkloadSpec(**base)


def simulate(w, partitions=1, delta=300, seed=0, trials=5, **cfg):
    """Run ``w`` on one store (relaxed containment) or on a synthetic k-store graph."""
    if partitions == 1:
        g = single_store(max(len(w.objects), 1))
        plan = trivial_plan(w)
        sim_cfg = SimConfig(delta_ms=delta, containment=False, **cfg)
    else:
        g = synthetic_store_graph(partitions, 10, 100, len(w.objects), seed)
        plan = randomized_search(w, g, trials, seed)
        sim_cfg = SimConfig(delta_ms=delta, **cfg)
    trace, met = run_simulation(w, plan, g, sim_cfg)
    return trace, met, plan, g


@pytest.fixture
def attacked():
    w = generate_workload(small_spec(m=4, beta=0.1), 7)
    return w, simulate(w, delta=400)


def hand_workload(txns, num_accounts=None, balance=1000, malicious=(), gap=100):
    """Workload from ``[(sources, destinations, tenant), ...]`` with 5% fractions."""
    from fractions import Fraction

    from aims_bench.workload import (DependencyGraph, Kind, Transaction, Workload,
                                     tenant_map)
    out = []
    for i, (src, dst, tenant) in enumerate(txns):
        kind = Kind.DISTRIBUTE if len(src) == 1 else (
            Kind.COLLECT if len(dst) == 1 else Kind.MANY_TO_MANY)
        out.append(Transaction(i, kind, tuple(src), tuple(dst),
                               tuple(Fraction(5, 100) for _ in src), tenant,
                               i in malicious, i * gap))
    accts = max((a for s, d, _ in txns for a in (*s, *d)), default=2) + 1
    spec = WorkloadSpec(n=len(out), alpha=max([2] + [len(s) for s, _, _ in txns]
                                              + [len(d) for _, d, _ in txns]),
                        beta=0.0, num_accounts=max(num_accounts or accts, 3),
                        initial_balance=balance, m=len(malicious),
                        arrival_rate=1000 / gap)
    edges = [(i, j) for i in range(len(out)) for j in range(i + 1, len(out))
             if out[i].rw_set & out[j].rw_set]
    return Workload(spec, tuple(out), DependencyGraph.from_edges(len(out), edges),
                    tenant_map(out))


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

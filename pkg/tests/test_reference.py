import itertools

import pytest

from aims_bench import reference
from aims_bench.partition import (PartitionPlan, StoreGraph, plan_objective, single_store,
                                  synthetic_store_graph, validate_plan)
from aims_bench.txlog import TransactionLog
from aims_bench.workload import generate_workload, with_malicious

from conftest import hand_workload, simulate, small_spec

STORE = {}.fromkeys(range(50), "M1")


def test_chain_closure_and_empty_closure():
    log = TransactionLog()
    log.append_write(1, {0: (10, 9), 1: (10, 11)}, 1, STORE)
    log.append_write(2, {1: (11, 10), 2: (10, 11)}, 2, STORE)
    log.append_write(3, {2: (11, 10), 3: (10, 11)}, 3, STORE)
    log.append_write(4, {7: (10, 9), 8: (10, 11)}, 4, STORE)
    assert reference.affected_closure_bruteforce(log.records, 1).payload == {2, 3}
    assert reference.affected_closure_bruteforce(log.records, 4).payload == set()


def test_fixpoint_rounds_are_bounded():
    w = generate_workload(small_spec(n=100, beta=0.2, num_accounts=3000), 2)
    trace, *_ = simulate(w)
    for t_m in (0, 17, 50):
        res = reference.affected_closure_bruteforce(trace.log.records, t_m)
        assert res.enumerated <= 100


def test_closure_follows_undo_provenance():
    # t1 writes x, t2 overwrites x; t2 is undone back to t1's version; t3 then reads x.
    log = TransactionLog()
    log.append_write(1, {0: (10, 9), 5: (10, 11)}, 1, STORE)
    log.append_write(2, {0: (9, 8), 6: (10, 11)}, 2, STORE)
    log.append_undo(0, 1, 3, "M1")
    log.append_write(3, {0: (9, 7), 7: (10, 12)}, 4, STORE)
    assert reference.affected_closure_bruteforce(log.records, 1).payload == {2, 3}
    assert reference.affected_closure_bruteforce(log.records, 2).payload == set()


def test_clean_replay_examples():
    w = generate_workload(small_spec(n=50, m=5), 3)
    everything = reference.clean_replay(w, {t.id for t in w.transactions})
    assert everything.payload == w.initial_balances() and everything.enumerated == 0
    benign, *_ = simulate(with_malicious(w, 0, 3))
    assert reference.clean_replay(w, ()).payload == benign.balances


@pytest.mark.parametrize("exclude", [set(), {0}, {1, 4, 9}, set(range(0, 50, 2))])
def test_clean_replay_conserves(exclude):
    w = generate_workload(small_spec(n=50), 4)
    bal = reference.clean_replay(w, exclude).payload
    assert sum(bal.values()) == w.spec.num_accounts * w.spec.initial_balance


def test_exhaustive_single_store():
    w = hand_workload([((0,), (1, 2), 0)])
    res = reference.exhaustive_partition(w, single_store(3))
    plan, obj = res.payload
    assert obj == 0 and set(plan.assignment.values()) == {"M1"} and res.enumerated == 1


def test_exhaustive_zero_delay_split():
    w = hand_workload([((0,), (1,), 0), ((2,), (1,), 1)])
    g = StoreGraph(["M1", "M2"], {"M1": 3, "M2": 3}, {("M1", "M2"): 0})
    plan, obj = reference.exhaustive_partition(w, g).payload
    assert obj == 0 and validate_plan(plan, w, g) == []
    # lexicographically smallest feasible assignment
    assert plan.assignment == {0: "M1", 1: "M2", 2: "M1"}


def test_exhaustive_is_a_floor():
    w = hand_workload([((0,), (1, 2), 0), ((3,), (2, 1), 1)])
    g = StoreGraph(["M1", "M2", "M3"], {s: 4 for s in ("M1", "M2", "M3")},
                   {("M1", "M2"): 90, ("M2", "M3"): 50, ("M1", "M3"): 70})
    _, opt = reference.exhaustive_partition(w, g).payload
    for combo in itertools.product(g.stores, repeat=4):
        plan = PartitionPlan(dict(zip(w.objects, combo)))
        if not validate_plan(plan, w, g):
            assert plan_objective(plan, w, g) >= opt


def test_exhaustive_errors():
    w = generate_workload(small_spec(n=10, beta=0.0), 0)
    with pytest.raises(reference.InstanceTooLargeError):
        reference.exhaustive_partition(w, synthetic_store_graph(3, 1, 2, 100, 0), bound=1000)
    shared = hand_workload([((0,), (1,), 0), ((2,), (1,), 1)])
    with pytest.raises(reference.ProvenNoFeasiblePlanError):
        reference.exhaustive_partition(shared, single_store(3))

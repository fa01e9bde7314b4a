import io

import pytest
from hypothesis import given, settings, strategies as st

from aims_bench import reference
from aims_bench.partition import (MalformedFileError, NoFeasiblePlanError, PartitionPlan,
                                  StoreGraph, UnassignedObjectError, UnknownStoreError,
                                  communication_cost, plan_objective, randomized_search,
                                  read_plan, read_store_graph, single_store, span,
                                  synthetic_store_graph, trial_rng, trivial_plan,
                                  validate_plan, write_plan, write_store_graph)
from aims_bench.workload import generate_workload

from conftest import hand_workload, small_spec


@pytest.fixture
def triangle():
    return StoreGraph(["M1", "M2", "M3"], {"M1": 10, "M2": 10, "M3": 10},
                      {("M1", "M2"): 90, ("M2", "M3"): 50, ("M1", "M3"): 70})


# --- cost ------------------------------------------------------------------

def test_two_store_span_costs_the_edge_label(triangle):
    assert communication_cost(triangle, {"M1", "M2"}) == 90


@pytest.mark.parametrize("stores", [set(), {"M2"}])
def test_degenerate_span_is_free(triangle, stores):
    assert communication_cost(triangle, stores) == 0


def test_three_store_span_takes_the_max(triangle):
    assert communication_cost(triangle, {"M1", "M2", "M3"}) == 90
    assert communication_cost(triangle, {"M2", "M3"}) == 50


def test_unknown_store(triangle):
    with pytest.raises(UnknownStoreError):
        communication_cost(triangle, {"M1", "M9"})


@settings(max_examples=60, deadline=None)
@given(k=st.integers(2, 6), seed=st.integers(0, 10**6), factor=st.integers(0, 5),
       data=st.data())
def test_cost_monotone_and_scales(k, seed, factor, data):
    g = synthetic_store_graph(k, 0, 200, 1, seed)
    sub = data.draw(st.sets(st.sampled_from(g.stores)))
    extra = data.draw(st.sampled_from(g.stores))
    assert communication_cost(g, sub | {extra}) >= communication_cost(g, sub)
    assert communication_cost(g.scaled(factor), sub) == factor * communication_cost(g, sub)


# --- spans and plans -------------------------------------------------------

def test_span_examples():
    w = hand_workload([((0,), (1, 2), 0)])
    t = w.transactions[0]
    assert span(PartitionPlan({0: "M1", 1: "M1", 2: "M1"}), t) == {"M1"}
    assert span(PartitionPlan({0: "M1", 1: "M2", 2: "M1"}), t) == {"M1", "M2"}
    with pytest.raises(UnassignedObjectError):
        span(PartitionPlan({0: "M1"}), t)


def test_objective_examples(triangle):
    w = hand_workload([((0,), (1, 2), 0), ((3,), (4, 5), 1)])
    assert plan_objective(trivial_plan(w), w, single_store(6)) == 0
    split = PartitionPlan({0: "M1", 1: "M2", 2: "M2", 3: "M1", 4: "M1", 5: "M2"})
    assert plan_objective(split, w, triangle) == 180
    assert plan_objective(split, w, triangle, aggregate="max") == 90


def test_objective_matches_independent_evaluation(triangle):
    w = generate_workload(small_spec(n=5, alpha=3, beta=0.4, num_accounts=40), 2)
    for seed in range(5):
        plan = randomized_search(w, triangle, 3, seed, containment=False)
        assert plan_objective(plan, w, triangle) == reference._objective(
            plan.assignment, w, triangle, "sum")


# --- validation ------------------------------------------------------------

def _shared_pair():
    # Account 2 is touched by tenants 0 and 1, so both transactions are multi-tenant.
    return hand_workload([((0,), (1, 2), 0), ((3,), (2, 4), 1)])


def test_colocated_multi_tenant_transaction_violates_containment(triangle):
    w = _shared_pair()
    plan = PartitionPlan({0: "M1", 1: "M1", 2: "M1", 3: "M2", 4: "M1"})
    v = validate_plan(plan, w, triangle)
    assert [(x.constraint, x.subject) for x in v] == [("containment", 0)]


def test_capacity_violation_names_the_store():
    w = hand_workload([((0,), (1, 2), 0)])
    g = StoreGraph(["M1", "M2"], {"M1": 2, "M2": 5}, {("M1", "M2"): 10})
    v = validate_plan(PartitionPlan({0: "M1", 1: "M1", 2: "M1"}), w, g)
    assert [(x.constraint, x.subject) for x in v] == [("capacity", "M1")]


def test_split_plan_within_capacity_is_clean(triangle):
    w = _shared_pair()
    plan = PartitionPlan({0: "M1", 1: "M1", 2: "M2", 3: "M2", 4: "M3"})
    assert validate_plan(plan, w, triangle) == []


def test_unassigned_object_is_reported(triangle):
    w = _shared_pair()
    v = validate_plan(PartitionPlan({0: "M1", 1: "M2", 2: "M2", 3: "M1"}), w, triangle)
    assert ("unassigned", 4) in [(x.constraint, x.subject) for x in v]


# --- search ----------------------------------------------------------------

def test_single_store_without_shared_objects():
    w = hand_workload([((0,), (1, 2), 0), ((3,), (4, 5), 0)])
    plan = randomized_search(w, single_store(10), 5, 0)
    assert set(plan.assignment.values()) == {"M1"}
    assert plan_objective(plan, w, single_store(10)) == 0


def test_single_store_cannot_contain_damage():
    with pytest.raises(NoFeasiblePlanError):
        randomized_search(_shared_pair(), single_store(10), 20, 0)


def test_insufficient_capacity():
    g = StoreGraph(["M1", "M2"], {"M1": 2, "M2": 2}, {("M1", "M2"): 10})
    with pytest.raises(NoFeasiblePlanError):
        randomized_search(_shared_pair(), g, 5, 0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(2, 5), beta=st.sampled_from([0.05, 0.3, 1.0]))
def test_search_output_is_always_feasible(seed, k, beta):
    w = generate_workload(small_spec(n=30, beta=beta, num_accounts=600), seed)
    g = synthetic_store_graph(k, 10, 100, -(-2 * len(w.objects) // k), seed)
    plan = randomized_search(w, g, 4, seed)
    assert validate_plan(plan, w, g) == []
    for t in w.multi_tenant():
        assert len(span(plan, t)) >= 2


def test_more_trials_never_hurt():
    w = generate_workload(small_spec(n=40, beta=0.2), 6)
    g = synthetic_store_graph(4, 10, 100, len(w.objects), 6)
    costs = [plan_objective(randomized_search(w, g, t, 6), w, g) for t in (1, 10, 200)]
    assert costs[0] >= costs[1] >= costs[2]


def test_search_is_deterministic_and_trials_are_order_free():
    w = generate_workload(small_spec(n=40, beta=0.2), 6)
    g = synthetic_store_graph(4, 10, 100, len(w.objects), 6)
    assert randomized_search(w, g, 30, 1) == randomized_search(w, g, 30, 1)
    assert trial_rng(1, 7).integers(1 << 30) == trial_rng(1, 7).integers(1 << 30)


def test_search_never_beats_exhaustive_optimum(triangle):
    w = hand_workload([((0,), (1, 2), 0), ((3,), (2, 1), 1)])
    opt_plan, opt = reference.exhaustive_partition(w, triangle).payload
    for seed in range(5):
        assert plan_objective(randomized_search(w, triangle, 20, seed), w, triangle) >= opt
    assert validate_plan(opt_plan, w, triangle) == []


# --- files -----------------------------------------------------------------

def test_store_graph_round_trip(triangle):
    buf = io.StringIO()
    write_store_graph(triangle, buf)
    assert buf.getvalue().splitlines()[:2] == ["stores 3", "cap M1 10"]
    buf.seek(0)
    assert read_store_graph(buf) == triangle


def test_plan_round_trip():
    plan = PartitionPlan({3: "M2", 1: "M1"})
    buf = io.StringIO()
    write_plan(plan, buf)
    buf.seek(0)
    assert read_plan(buf) == plan


@pytest.mark.parametrize("text", ["cap M1 10\n", "stores 2\ncap M1 1\ncap M2 1\n",
                                  "stores 1\ncap M1 ten\n", "stores 1\nwat\n"])
def test_bad_store_graph_files(text):
    with pytest.raises(MalformedFileError):
        read_store_graph(io.StringIO(text))


def test_store_graph_rejects_negative_delay():
    with pytest.raises(ValueError):
        StoreGraph(["A", "B"], {"A": 1, "B": 1}, {("A", "B"): -1})

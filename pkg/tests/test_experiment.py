import io

import pytest

from aims_bench.experiment import (CSV_COLUMNS, PLOT_METRICS, ConfigError, ExperimentConfig,
                                   aggregate_rows, dumps_csv, emit_plotdata, parse_config,
                                   read_csv, run_matrix)

SMALL = """
[workload]
n = 60
alpha = 5
beta = 0.1
num_accounts = 1500
arrival_rate = 50

[sweep]
m = 0, 3, 6
delta_ms = 100, 400
partitions = 1, 2, 4
seeds = 1, 2, 3, 4, 5

[search]
trials = 3
"""


def test_defaults():
    cfg = parse_config("[sweep]\nm = 1\n")
    assert cfg.sim.base_commit_ms == 5
    assert cfg.sim.arrival_mode == "fixed"
    assert cfg.workload.arrival_mode == "fixed"
    assert cfg.m_values == [1] and cfg.seeds == [1] and cfg.aggregate == "sum"


def test_empty_sweep_names_the_key():
    with pytest.raises(ConfigError) as exc:
        parse_config("[sweep]\nm =\n")
    assert [k for k, _ in exc.value.problems] == ["m"]


def test_preset():
    cfg = parse_config("[workload]\npreset = paper-table2\n")
    w = cfg.workload
    assert (w.n, w.arrival_rate, w.alpha, w.beta) == (5000, 10.0, 10, 0.5)


def test_unknown_keys_and_values_are_all_reported():
    with pytest.raises(ConfigError) as exc:
        parse_config("[sim]\ndelta = 3\nbase_commit_ms = x\n[plot]\nfoo = 1\n")
    keys = {k for k, _ in exc.value.problems}
    assert keys == {"sim.delta", "sim.base_commit_ms", "plot"}


@pytest.mark.parametrize("text, key", [("[sweep]\nseeds = 1, 1\n", "seeds"),
                                       ("[sweep]\npartitions = 0\n", "partitions"),
                                       ("[search]\naggregate = mean\n", "search.aggregate"),
                                       ("[workload]\npreset = nope\n", "workload.preset")])
def test_invalid_values(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert key in [k for k, _ in exc.value.problems]


@pytest.fixture(scope="module")
def matrix():
    return run_matrix(parse_config(SMALL))


def test_matrix_cardinality_and_order(matrix):
    rows, failures = matrix
    assert failures == []
    assert len(rows) == 90
    keys = [(r["m"], r["delta_ms"], r["partitions"], r["seed"]) for r in rows]
    assert keys == sorted(keys)


def test_benign_rows_have_no_damage(matrix):
    rows, _ = matrix
    zero = [r for r in rows if r["m"] == 0]
    assert zero and all(r["affected"] == 0 and r["episodes"] == 0 for r in zero)
    assert all(r["episodes"] <= r["m"] for r in rows)


def test_csv_round_trip_and_schema(matrix):
    rows, _ = matrix
    text = dumps_csv(rows)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert text.isascii()
    back = read_csv(io.StringIO(text))
    assert dumps_csv(back) == text


def test_csv_is_byte_identical_across_runs(matrix):
    rows, _ = matrix
    again, _ = run_matrix(parse_config(SMALL))
    assert dumps_csv(again) == dumps_csv(rows)


def test_plotdata_shape(matrix, tmp_path):
    rows, _ = matrix
    paths = emit_plotdata(read_csv(io.StringIO(dumps_csv(rows))), "m", str(tmp_path))
    assert sorted(p.rsplit("/", 1)[1] for p in paths) == sorted(
        f"{m}_vs_m.csv" for m in PLOT_METRICS)
    for p in paths:
        lines = open(p).read().splitlines()
        assert lines[0] == "x,series,mean,stderr"
        assert len(lines) - 1 == 18


def test_single_seed_has_zero_stderr():
    row = dict(m=1, delta_ms=5, partitions=1, seed=1, affected=3,
               avg_recovery_ms=2.0, avg_response_ms=7.0)
    for pts in aggregate_rows([row], "m").values():
        assert [p[3] for p in pts] == [0.0]


def test_means_on_two_rows():
    base = dict(m=5, delta_ms=100, partitions=1)
    rows = [dict(base, seed=1, affected=2, avg_recovery_ms=10.0, avg_response_ms=5.0),
            dict(base, seed=2, affected=5, avg_recovery_ms=16.0, avg_response_ms=6.0)]
    agg = aggregate_rows(rows, "m")
    (x, series, mean, err), = agg["affected"]
    assert (x, series, mean) == (5, "delta_ms=100;partitions=1", 3.5)
    assert err == pytest.approx(1.5)
    assert agg["avg_recovery_ms"][0][2:] == pytest.approx((13.0, 3.0))
    assert agg["avg_response_ms"][0][2] == 5.5


def test_empty_rows_rejected(tmp_path):
    with pytest.raises(ValueError):
        emit_plotdata([], "m", str(tmp_path))


def test_failing_cell_does_not_stop_the_matrix(tmp_path):
    stores = tmp_path / "s.txt"
    stores.write_text("stores 2\ncap A 1\ncap B 1\ndelay A B 5\n")  # far too small
    cfg = parse_config(SMALL.replace("seeds = 1, 2, 3, 4, 5", "seeds = 1")
                       + f"\n[stores]\nfile = {stores}\n")
    cfg.partitions = [1, 2]
    rows, failures = run_matrix(cfg)
    assert {r["partitions"] for r in rows} == {1}
    assert len(failures) == 1 and "partitions=2" in failures[0]


def test_config_object_defaults():
    cfg = ExperimentConfig()
    assert cfg.partitions == [1] and cfg.trials == 20

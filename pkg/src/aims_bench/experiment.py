"""Experiment matrix: sweep malicious count, detection delay and partition count."""
from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import os
import statistics
from dataclasses import dataclass, field, replace
from typing import Iterable, TextIO

from .partition import (PartitionPlan, StoreGraph, read_store_graph, randomized_search,
                        single_store, synthetic_store_graph, trivial_plan)
from .sim import SimConfig, run_simulation
from .workload import Workload, WorkloadSpec, generate_workload, read_workload, with_malicious

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["m", "delta_ms", "partitions", "seed", "affected", "avg_recovery_ms",
               "avg_response_ms", "episodes", "blocked", "plan_objective"]
PLOT_METRICS = ["affected", "avg_recovery_ms", "avg_response_ms"]
SWEEP_DIMENSIONS = ["m", "delta_ms", "partitions"]

PRESETS = {
    # alpha is the fan degree, beta the edge probability.
    "paper-table2": dict(n=5000, arrival_rate=10.0, alpha=10, beta=0.5,
                         initial_balance=1_000_000, num_accounts=100_000, num_tenants=4),
}


class ConfigError(Exception):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{k}: {msg}" for k, msg in problems))


@dataclass
class ExperimentConfig:
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    workload_file: str | None = None
    stores_file: str | None = None
    delay_lo_ms: int = 10
    delay_hi_ms: int = 100
    capacity_factor: float = 2.0
    sim: SimConfig = field(default_factory=SimConfig)
    m_values: list[int] = field(default_factory=lambda: [0])
    delta_values: list[int] = field(default_factory=lambda: [SimConfig().delta_ms])
    partitions: list[int] = field(default_factory=lambda: [1])
    seeds: list[int] = field(default_factory=lambda: [1])
    trials: int = 20
    aggregate: str = "sum"
    out_dir: str = "out"


_SCHEMA = {
    "workload": {"preset": str, "file": str, "n": int, "alpha": int, "beta": float,
                 "num_accounts": int, "initial_balance": int, "arrival_rate": float,
                 "num_tenants": int},
    "stores": {"file": str, "delay_lo_ms": int, "delay_hi_ms": int, "capacity_factor": float},
    "sim": {"delta_ms": int, "base_commit_ms": int, "arrival_mode": str, "event_cap": int,
            "lock_ms_per_txn": int, "compensate_ms": int},
    "sweep": {"m": "ints", "delta_ms": "ints", "partitions": "ints", "seeds": "ints"},
    "search": {"trials": int, "aggregate": str},
    "output": {"dir": str},
}


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def parse_config(source: str | TextIO) -> ExperimentConfig:
    """Parse INI-style ``key = value`` text; raises ConfigError listing every problem."""
    text = source if isinstance(source, str) else source.read()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([("<file>", str(exc).splitlines()[0])]) from None

    problems: list[tuple[str, str]] = []
    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            problems.append((section, "unknown section"))
            continue
        for key, raw in parser.items(section):
            path = f"{section}.{key}"
            kind = _SCHEMA[section].get(key)
            if kind is None:
                problems.append((path, "unknown key"))
                continue
            try:
                values.setdefault(section, {})[key] = _ints(raw) if kind == "ints" else kind(raw)
            except ValueError:
                problems.append((path, f"bad value {raw!r}"))
    if problems:
        raise ConfigError(problems)

    cfg = ExperimentConfig()
    wl = dict(values.get("workload", {}))
    preset = wl.pop("preset", None)
    spec_kwargs: dict[str, object] = {}
    if preset is not None:
        if preset not in PRESETS:
            problems.append(("workload.preset", f"unknown preset {preset!r}"))
        else:
            spec_kwargs.update(PRESETS[preset])
    cfg.workload_file = wl.pop("file", None)
    spec_kwargs.update(wl)

    sim_kwargs = dict(values.get("sim", {}))
    try:
        cfg.sim = SimConfig(**sim_kwargs)
    except ValueError as exc:
        problems.append(("sim", str(exc)))
    spec_kwargs["arrival_mode"] = cfg.sim.arrival_mode
    try:
        cfg.workload = WorkloadSpec(**spec_kwargs)
    except ValueError as exc:
        problems.append(("workload", str(exc)))

    st = values.get("stores", {})
    cfg.stores_file = st.get("file")
    cfg.delay_lo_ms = st.get("delay_lo_ms", cfg.delay_lo_ms)
    cfg.delay_hi_ms = st.get("delay_hi_ms", cfg.delay_hi_ms)
    cfg.capacity_factor = st.get("capacity_factor", cfg.capacity_factor)
    if not 0 <= cfg.delay_lo_ms <= cfg.delay_hi_ms:
        problems.append(("stores.delay_lo_ms", "need 0 <= delay_lo_ms <= delay_hi_ms"))
    if cfg.capacity_factor < 1.0:
        problems.append(("stores.capacity_factor", "must be >= 1"))

    sw = values.get("sweep", {})
    cfg.m_values = sw.get("m", cfg.m_values)
    cfg.delta_values = sw.get("delta_ms", [cfg.sim.delta_ms])
    cfg.partitions = sw.get("partitions", cfg.partitions)
    cfg.seeds = sw.get("seeds", cfg.seeds)
    for key, vals in (("m", cfg.m_values), ("delta_ms", cfg.delta_values),
                      ("partitions", cfg.partitions), ("seeds", cfg.seeds)):
        if not vals:
            problems.append((key, "sweep list must not be empty"))
    if len(set(cfg.seeds)) != len(cfg.seeds):
        problems.append(("seeds", "seeds must be distinct"))
    if any(p < 1 for p in cfg.partitions):
        problems.append(("partitions", "partition counts must be >= 1"))
    if any(d < 0 for d in cfg.delta_values):
        problems.append(("delta_ms", "delays must be >= 0"))
    if cfg.workload_file is None and any(not 0 <= m <= cfg.workload.n for m in cfg.m_values):
        problems.append(("m", f"malicious counts must lie in [0, {cfg.workload.n}]"))

    se = values.get("search", {})
    cfg.trials = se.get("trials", cfg.trials)
    cfg.aggregate = se.get("aggregate", cfg.aggregate)
    if cfg.trials < 1:
        problems.append(("search.trials", "must be >= 1"))
    if cfg.aggregate not in ("sum", "max"):
        problems.append(("search.aggregate", "must be 'sum' or 'max'"))
    cfg.out_dir = values.get("output", {}).get("dir", cfg.out_dir)
    if problems:
        raise ConfigError(problems)
    return cfg


def base_workload(cfg: ExperimentConfig, seed: int) -> Workload:
    if cfg.workload_file:
        with open(cfg.workload_file) as fh:
            return read_workload(fh)
    return generate_workload(replace(cfg.workload, m=0), seed)


def store_graph_for(cfg: ExperimentConfig, w: Workload, partitions: int, seed: int) -> StoreGraph:
    n_obj = len(w.objects)
    if partitions == 1:
        return single_store(max(n_obj, 1))
    if cfg.stores_file:
        with open(cfg.stores_file) as fh:
            g = read_store_graph(fh)
        if len(g.stores) != partitions:
            raise ValueError(f"{cfg.stores_file} has {len(g.stores)} stores, sweep wants {partitions}")
        return g
    cap = math.ceil(cfg.capacity_factor * n_obj / partitions)
    return synthetic_store_graph(partitions, cfg.delay_lo_ms, cfg.delay_hi_ms, cap,
                                 seed * 1009 + partitions)


def plan_for(cfg: ExperimentConfig, w: Workload, g: StoreGraph, seed: int) -> PartitionPlan:
    if len(g.stores) == 1:
        # The unpartitioned baseline cannot split anything.
        return trivial_plan(w, g.stores[0])
    return randomized_search(w, g, cfg.trials, seed, cfg.aggregate)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def run_matrix(cfg: ExperimentConfig) -> tuple[list[dict], list[str]]:
    """One row per (m, delta, partitions, seed) cell, canonically ordered.

    Returns ``(rows, failures)``; a failing cell is logged and skipped.
    """
    rows, failures = [], []
    for seed in cfg.seeds:
        try:
            base = base_workload(cfg, seed)
        except Exception as exc:  # noqa: BLE001 - a bad cell must not stop the matrix
            failures.append(f"seed={seed}: {exc}")
            continue
        for parts in cfg.partitions:
            try:
                g = store_graph_for(cfg, base, parts, seed)
                plan = plan_for(cfg, base, g, seed)
            except Exception as exc:  # noqa: BLE001
                failures.append(f"seed={seed} partitions={parts}: {exc}")
                continue
            sim_base = replace(cfg.sim, containment=parts > 1)
            for m in cfg.m_values:
                w = with_malicious(base, m, seed)
                for delta in cfg.delta_values:
                    cell = f"m={m} delta_ms={delta} partitions={parts} seed={seed}"
                    try:
                        _, met = run_simulation(w, plan, g, replace(sim_base, delta_ms=delta), seed)
                    except Exception as exc:  # noqa: BLE001
                        logger.error("cell %s failed: %s", cell, exc)
                        failures.append(f"{cell}: {exc}")
                        continue
                    logger.info("cell %s affected=%d", cell, met.affected_count)
                    rows.append({
                        "m": m, "delta_ms": delta, "partitions": parts, "seed": seed,
                        "affected": met.affected_count,
                        "avg_recovery_ms": _fmt(met.avg_recovery_time),
                        "avg_response_ms": _fmt(met.avg_response_time),
                        "episodes": met.episodes, "blocked": met.blocked_count,
                        "plan_objective": met.plan_objective,
                    })
    rows.sort(key=lambda r: (r["m"], r["delta_ms"], r["partitions"], r["seed"]))
    return rows, failures


def write_csv(rows: Iterable[dict], sink: TextIO) -> None:
    writer = csv.DictWriter(sink, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(r[k]) if isinstance(r[k], float) else r[k]
                         for k in CSV_COLUMNS})


def read_csv(source: TextIO) -> list[dict]:
    rows = []
    for r in csv.DictReader(source):
        rows.append({k: (float(v) if k.startswith("avg_") else int(v)) for k, v in r.items()})
    return rows


def aggregate_rows(rows: list[dict], dimension: str = "m") -> dict[str, list[tuple]]:
    """Per metric: (x, series, mean, stderr) points averaged over seeds."""
    if not rows:
        raise ValueError("no rows to aggregate")
    if dimension not in SWEEP_DIMENSIONS:
        raise ValueError(f"dimension must be one of {SWEEP_DIMENSIONS}")
    others = [d for d in SWEEP_DIMENSIONS if d != dimension]
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        series = ";".join(f"{d}={r[d]}" for d in others)
        groups.setdefault((r[dimension], series), []).append(r)
    out = {}
    for metric in PLOT_METRICS:
        points = []
        for (x, series), members in sorted(groups.items()):
            vals = [float(r[metric]) for r in members]
            mean = statistics.fmean(vals)
            err = statistics.stdev(vals) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
            points.append((x, series, mean, err))
        out[metric] = points
    return out


def emit_plotdata(rows: list[dict], dimension: str, out_dir: str) -> list[str]:
    """Write one ``<metric>_vs_<dimension>.csv`` per metric; returns the paths."""
    paths = []
    os.makedirs(out_dir, exist_ok=True)
    for metric, points in aggregate_rows(rows, dimension).items():
        path = os.path.join(out_dir, f"{metric}_vs_{dimension}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "series", "mean", "stderr"])
            for x, series, mean, err in points:
                w.writerow([x, series, _fmt(mean), _fmt(err)])
        paths.append(path)
    return paths


def dumps_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


"""``aims-bench`` command line: gen | plan | sim | matrix | verify | plot."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import reference
from .experiment import (ConfigError, ExperimentConfig, emit_plotdata, parse_config,
                         read_csv, run_matrix, store_graph_for, write_csv)
from .partition import (MalformedFileError, PartitionError, randomized_search, read_plan,
                        read_store_graph, validate_plan, write_plan, write_store_graph)
from .sim import Simulation, SimulationError, audit_admissions, compute_metrics
from .workload import WorkloadError, generate_workload, read_workload, write_workload

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

logger = logging.getLogger("aims_bench")


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        return parse_config(fh)


def _out(args, cfg: ExperimentConfig) -> str:
    out = args.out or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def cmd_gen(args, cfg: ExperimentConfig) -> int:
    m = args.m if args.m is not None else cfg.m_values[0]
    w = generate_workload(replace(cfg.workload, m=m), args.seed)
    path = os.path.join(_out(args, cfg), "workload.txt")
    with open(path, "w") as fh:
        write_workload(w, fh)
    print(path)
    return EXIT_OK


def _read(path, reader):
    with open(path) as fh:
        return reader(fh)


def cmd_plan(args, cfg: ExperimentConfig) -> int:
    w = _read(args.workload, read_workload)
    if args.stores:
        g = _read(args.stores, read_store_graph)
    else:
        g = store_graph_for(cfg, w, args.partitions, args.seed)
    trials = args.trials or cfg.trials
    plan = randomized_search(w, g, trials, args.seed, cfg.aggregate,
                             containment=len(g.stores) > 1)
    out = _out(args, cfg)
    with open(os.path.join(out, "plan.txt"), "w") as fh:
        write_plan(plan, fh)
    with open(os.path.join(out, "stores.txt"), "w") as fh:
        write_store_graph(g, fh)
    print(os.path.join(out, "plan.txt"))
    return EXIT_OK


def _simulate(args, cfg: ExperimentConfig):
    w = _read(args.workload, read_workload)
    plan = _read(args.plan, read_plan)
    g = _read(args.stores, read_store_graph)
    sim_cfg = replace(cfg.sim, containment=len(g.stores) > 1)
    if args.delta is not None:
        sim_cfg = replace(sim_cfg, delta_ms=args.delta)
    trace = Simulation(w, plan, g, sim_cfg).run()
    return w, plan, g, trace


def cmd_sim(args, cfg: ExperimentConfig) -> int:
    _, _, _, trace = _simulate(args, cfg)
    out = _out(args, cfg)
    with open(os.path.join(out, "trace.tsv"), "w") as fh:
        trace.export(fh)
    met = compute_metrics(trace)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(met.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(met.as_dict(), sort_keys=True))
    return EXIT_OK


def cmd_verify(args, cfg: ExperimentConfig) -> int:
    w, plan, g, trace = _simulate(args, cfg)
    problems = [f"plan: {v}" for v in validate_plan(plan, w, g, containment=len(g.stores) > 1)]
    for ep in trace.episodes:
        oracle = reference.affected_closure_bruteforce(trace.log.records[:ep.log_len], ep.t_m)
        if oracle.payload != set(ep.affected):
            problems.append(f"episode {ep.id}: affected set differs from brute force")
    replay = reference.clean_replay(w, set(w.malicious_ids), trace.commit_order).payload
    diff = [a for a in replay if replay[a] != trace.balances[a]]
    if diff:
        problems.append(f"final state differs from clean replay on {len(diff)} accounts")
    problems += audit_admissions(trace)
    if args.trace:
        with open(args.trace) as fh:
            if fh.read() != trace.dumps():
                problems.append(f"{args.trace} does not match a fresh run")
    for p in problems:
        print("MISMATCH", p)
    print(f"verify: {len(trace.episodes)} episode(s), {len(problems)} problem(s)")
    return EXIT_FAIL if problems else EXIT_OK


def cmd_matrix(args, cfg: ExperimentConfig) -> int:
    if args.seed is not None:
        cfg.seeds = [args.seed]
    rows, failures = run_matrix(cfg)
    path = os.path.join(_out(args, cfg), "results.csv")
    with open(path, "w", newline="") as fh:
        write_csv(rows, fh)
    for f in failures:
        print("FAILED", f, file=sys.stderr)
    print(path)
    return EXIT_FAIL if failures else EXIT_OK


def cmd_plot(args, cfg: ExperimentConfig) -> int:
    rows = _read(args.csv, read_csv)
    for p in emit_plotdata(rows, args.dimension, _out(args, cfg)):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aims-bench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=1):
        sp.add_argument("--config", help="experiment config (INI key = value)")
        sp.add_argument("--out", help="output directory (default: [output] dir)")
        sp.add_argument("--seed", type=int, default=seed_default)

    sp = sub.add_parser("gen", help="generate a workload file")
    common(sp)
    sp.add_argument("--m", type=int, help="malicious transactions (default: first sweep value)")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("plan", help="search a partition plan")
    common(sp)
    sp.add_argument("--workload", required=True)
    sp.add_argument("--stores", help="store graph file (default: synthetic)")
    sp.add_argument("--partitions", type=int, default=10)
    sp.add_argument("--trials", type=int)
    sp.set_defaults(func=cmd_plan)

    for name, func, text in (("sim", cmd_sim, "simulate one workload"),
                             ("verify", cmd_verify, "cross-check a run against the oracles")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--workload", required=True)
        sp.add_argument("--plan", required=True)
        sp.add_argument("--stores", required=True)
        sp.add_argument("--delta", type=int, help="override [sim] delta_ms")
        if name == "verify":
            sp.add_argument("--trace", help="previously exported trace to compare")
        sp.set_defaults(func=func)

    sp = sub.add_parser("matrix", help="run the experiment matrix to CSV")
    common(sp, seed_default=None)
    sp.set_defaults(func=cmd_matrix)

    sp = sub.add_parser("plot", help="aggregate a results CSV into plot data")
    common(sp)
    sp.add_argument("--csv", required=True)
    sp.add_argument("--dimension", default="m", choices=["m", "delta_ms", "partitions"])
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args, cfg)
    except (WorkloadError, MalformedFileError, OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PartitionError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

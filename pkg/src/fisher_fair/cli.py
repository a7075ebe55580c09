"""Command-line interface.

Subcommands: solve, verify, emit-conic, sda, ellipsoid, oracle,
sample-instance, plot-data, bench.  Exit codes: 0 success (certified where
applicable), 1 input or validation error, 2 solver finished without a
certificate (the best iterate is still written).  ``bench`` parallelizes
across grid cells; FISHER_FAIR_THREADS caps the process pool.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import sda as sda_mod
from .dual_solver import (
    EquilibriumResult,
    SolveConfig,
    allocation_from_beta,
    solve,
)
from .ellipsoid import ellipsoid_solve
from .envelope import plot_data
from .errors import FisherFairError, NotConverged
from .feasible import emit_conic_program
from .market import load_instance
from .sampling import sample_document
from .verification import check_equilibrium, discretized_oracle, fairness


def _write_json(doc, path):
    if path == "-":
        json.dump(doc, sys.stdout, indent=1)
        sys.stdout.write("\n")
        return
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _write_csv(path, header, rows):
    out = sys.stdout if path == "-" else open(path, "w", newline="", encoding="utf-8")
    try:
        writer = csv.writer(out)
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()


def _cmd_solve(args):
    instance = load_instance(args.instance)
    mode = args.mode
    if mode in ("auto", "dual"):
        cfg = SolveConfig(gap_tol=args.gap_tol)
        try:
            result = solve(instance, cfg)
            code = 0
        except NotConverged as exc:
            result = exc.result
            code = 2
        if args.out:
            result.save(args.out)
        print(f"gap {result.gap:.3e} after {result.iterations} evaluations")
        return code
    if mode == "sda":
        trace = sda_mod.sda_run(instance, args.iters, args.seed)
        result = allocation_from_beta(instance, trace.beta_avg[-1])
        result.iterations = args.iters
        if args.out:
            result.save(args.out)
        print(f"sda average after {args.iters} samples, gap {result.gap:.3e}")
        return 0 if result.gap <= args.gap_tol else 2
    if mode == "ellipsoid":
        res = ellipsoid_solve(instance, args.epsilon)
        if args.out:
            _write_json(res.to_json(), args.out)
        print(f"ellipsoid finished after {res.calls} oracle calls "
              f"(budget {res.call_budget}), certified={res.certified}")
        return 0 if res.certified else 2
    raise FisherFairError(f"unknown mode {mode!r}")


def _cmd_verify(args):
    instance = load_instance(args.instance)
    with open(args.result, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    result = EquilibriumResult.from_json(doc)
    report = check_equilibrium(instance, result.allocation, result.beta,
                               tol=args.tol, delta=result.delta)
    fair = fairness(instance, result.allocation, tol=args.tol)
    out = {"kkt": report.to_json(), "fairness": fair.to_json()}
    _write_json(out, args.out)
    ok = report.passed and fair.passed
    print(f"kkt {'pass' if report.passed else 'FAIL'}, "
          f"fairness {'pass' if fair.passed else 'FAIL'} at tol {args.tol:g}")
    return 0 if ok else 2


def _cmd_emit_conic(args):
    instance = load_instance(args.instance)
    program = emit_conic_program(instance)
    _write_json(program.to_json(), args.out)
    counts = program.cone_counts()
    print(f"{program.num_vars} variables, {program.num_rows} rows, "
          f"{program.nonzeros()} nonzeros, {counts['soc3']} soc3, "
          f"{counts['exp3']} exp3 cones")
    return 0


def _cmd_sda(args):
    instance = load_instance(args.instance)
    beta_ref = None
    if args.ref:
        with open(args.ref, "r", encoding="utf-8") as fh:
            beta_ref = np.asarray(json.load(fh)["beta"], dtype=float)
    trace = sda_mod.sda_run(instance, args.iters, args.seed, beta_ref=beta_ref)
    header, rows = trace.csv_rows()
    _write_csv(args.out, header, rows)
    print(f"trace with {len(rows)} checkpoints written")
    return 0


def _cmd_ellipsoid(args):
    instance = load_instance(args.instance)
    res = ellipsoid_solve(instance, args.epsilon, collect_log=bool(args.log))
    if args.log:
        _write_csv(args.log, ["iteration", "feasible", "objective", "cut", "volume_proxy"],
                   [(it, fe, "" if f is None else f, kind, vol)
                    for it, fe, f, kind, vol in res.log])
    if args.out:
        _write_json(res.to_json(), args.out)
    print(f"{res.calls} oracle calls (budget {res.call_budget}), "
          f"certified={res.certified}")
    return 0 if res.certified else 2


def _cmd_oracle(args):
    instance = load_instance(args.instance)
    res = discretized_oracle(instance, args.cells)
    _write_json(res.to_json(), args.out)
    print(f"proportional response converged in {res.rounds} rounds")
    return 0


def _cmd_sample(args):
    doc = sample_document(args.n, args.k, args.seed, mode=args.mode)
    _write_json(doc, args.out)
    return 0


def _cmd_plot_data(args):
    instance = load_instance(args.instance)
    if args.result:
        with open(args.result, "r", encoding="utf-8") as fh:
            beta = np.asarray(json.load(fh)["beta"], dtype=float)
    else:
        beta = solve(instance).beta
    header, rows = plot_data(instance, beta, num_points=args.points)
    _write_csv(args.out, header, [list(row) for row in rows])
    return 0


def _bench_cell(task):
    n, k, seed, gap_tol = task
    t0 = time.perf_counter()
    doc = sample_document(n, k, seed)
    instance = load_instance(doc)
    t1 = time.perf_counter()
    try:
        solve(instance, SolveConfig(gap_tol=gap_tol))
    except NotConverged:
        pass
    t2 = time.perf_counter()
    return n, k, seed, t1 - t0, t2 - t1


def _cmd_bench(args):
    try:
        n_part, k_part = args.grid.split(":")
        ns = [int(v) for v in n_part.split(",") if v]
        ks = [int(v) for v in k_part.split(",") if v]
    except ValueError as exc:
        raise FisherFairError(f"bad --grid value {args.grid!r}; "
                              "expected N1,N2,..:K1,K2,..") from exc
    seeds = [int(v) for v in args.seeds.split(",") if v]
    tasks = [(n, k, s, args.gap_tol) for n in ns for k in ks for s in seeds]
    workers = int(os.environ.get("FISHER_FAIR_THREADS", os.cpu_count() or 1))
    results = []
    if tasks:
        if workers > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_bench_cell, tasks))
        else:
            results = [_bench_cell(t) for t in tasks]
    cells = {}
    for n, k, _, tb, ts in results:
        cells.setdefault((n, k), []).append((tb, ts))
    rows = []
    for (n, k), samples in sorted(cells.items()):
        build = np.array([s[0] for s in samples])
        slv = np.array([s[1] for s in samples])
        total = build + slv
        rows.append([n, k, len(samples),
                     float(build.mean()), _stderr(build),
                     float(slv.mean()), _stderr(slv),
                     float(total.mean()), _stderr(total)])
    _write_csv(args.out, ["n", "k", "samples", "build_mean", "build_stderr",
                          "solve_mean", "solve_stderr", "total_mean",
                          "total_stderr"], rows)
    return 0


def _stderr(a):
    if a.size <= 1:
        return 0.0
    return float(a.std(ddof=1) / math.sqrt(a.size))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fisher-fair",
        description="Market equilibria and fair divisions of [0, 1] under "
                    "piecewise-linear valuations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="compute a certified equilibrium")
    p.add_argument("--instance", required=True)
    p.add_argument("--mode", choices=["auto", "dual", "sda", "ellipsoid"],
                   default="auto")
    p.add_argument("--out", default=None, help="result JSON path")
    p.add_argument("--gap-tol", type=float, default=1e-8, dest="gap_tol")
    p.add_argument("--epsilon", type=float, default=1e-4,
                   help="accuracy for --mode ellipsoid")
    p.add_argument("--iters", type=int, default=100000,
                   help="samples for --mode sda")
    p.add_argument("--seed", type=int, default=0, help="seed for --mode sda")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("verify", help="KKT and fairness report for a result file")
    p.add_argument("--instance", required=True)
    p.add_argument("--result", required=True)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", default="-")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("emit-conic", help="write the conic program as JSON")
    p.add_argument("--instance", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=_cmd_emit_conic)

    p = sub.add_parser("sda", help="stochastic dual averaging trace")
    p.add_argument("--instance", required=True)
    p.add_argument("--iters", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ref", default=None,
                   help="result JSON supplying a reference beta for sqerr")
    p.add_argument("--out", default="-")
    p.set_defaults(func=_cmd_sda)

    p = sub.add_parser("ellipsoid", help="run the ellipsoid solver")
    p.add_argument("--instance", required=True)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--out", default=None)
    p.add_argument("--log", default=None, help="diagnostic CSV path")
    p.set_defaults(func=_cmd_ellipsoid)

    p = sub.add_parser("oracle", help="discretized proportional-response check")
    p.add_argument("--instance", required=True)
    p.add_argument("--cells", type=int, default=2000)
    p.add_argument("--out", default="-")
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("sample-instance", help="generate a random instance")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["linear", "quasilinear"], default="linear")
    p.add_argument("--out", default="-")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("plot-data", help="envelope and scaled valuations as CSV")
    p.add_argument("--instance", required=True)
    p.add_argument("--result", default=None,
                   help="result JSON with beta (otherwise solve first)")
    p.add_argument("--points", type=int, default=1000)
    p.add_argument("--out", default="-")
    p.set_defaults(func=_cmd_plot_data)

    p = sub.add_parser("bench", help="timing table over an n x k grid")
    p.add_argument("--grid", required=True, help="N1,N2,..:K1,K2,..")
    p.add_argument("--seeds", default="1,2,3,4,5,6,7,8")
    p.add_argument("--gap-tol", type=float, default=1e-6, dest="gap_tol")
    p.add_argument("--out", default="-")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FisherFairError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: malformed JSON input ({exc})", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

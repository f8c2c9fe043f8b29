"""Command-line interface: kvchaos <subcommand> [flags].

Subcommands: enumerate-partitions, simulate-flow, expand-stopped,
expand-flat, expand-lie, expand-npoint, verify.  The KVCHAOS_OUT
environment variable overrides the output directory.  All CSV output
uses ',' separators, '.' decimal points and LF line endings.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import flow, harness, kv, noise, partitions
from . import semigroup as sg


def _out_dir(args) -> str:
    out = args.out or os.environ.get("KVCHAOS_OUT", "out")
    os.makedirs(out, exist_ok=True)
    return out


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="root RNG seed")
    p.add_argument("--out", default=None,
                   help="output directory (default: $KVCHAOS_OUT or ./out)")


def _cmd_enumerate(args) -> int:
    klass = {"R": "R", "Rk": "Rk", "Rbreve": "Rbreve"}[args.klass]
    chains = partitions.enumerate_chains(
        args.n, klass, k=args.k, max_length=args.max_length)
    for c in chains:
        print(c)
    return 0


def _load_rule(spec_text: str) -> partitions.LambdaRule:
    return partitions.make_rule(spec_text)


def _cmd_simulate_flow(args) -> int:
    starts = [float(x) for x in args.starts.split(",")]
    n = args.n or len(starts)
    if len(starts) != n:
        raise SystemExit(f"--n {n} does not match {len(starts)} start values")
    out = _out_dir(args)
    bridge = not args.no_bridge
    if args.reps == 1:
        bundle = noise.sample_bundle(n, args.t, args.dt, args.seed)
        if args.rule == "sequential":
            system, record = flow.simulate_sequential(starts, bundle,
                                                      bridge=bridge)
        else:
            rule = _load_rule(args.rule)
            system, record = flow.simulate_lambda(starts, rule, bundle,
                                                  bridge=bridge)
        path = os.path.join(out, "trajectories.csv")
        times = system.times
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("step,t," + ",".join(f"x{i + 1}" for i in range(n)) + "\n")
            for j in range(len(times)):
                vals = ",".join(format(system.trajectories[i, j], ".12g")
                                for i in range(n))
                fh.write(f"{j},{format(times[j], '.12g')},{vals}\n")
        print(f"wrote {path}")
        print("merges:", " ".join(f"tau={tau:.6g}" for tau in record.times)
              or "(none)")
        return 0

    if args.rule == "sequential":
        batch = flow.simulate_sequential_batch(starts, args.reps, args.t,
                                               args.dt, args.seed,
                                               bridge=bridge)
    else:
        rule = _load_rule(args.rule)
        batch = flow.simulate_lambda_batch(starts, rule, args.reps, args.t,
                                           args.dt, args.seed, bridge=bridge)
    path = os.path.join(out, "scenarios.csv")
    records = batch.records()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rep", "chain"]
                        + [f"tau{j + 1}" for j in range(n - 1)]
                        + ["final_blocks"])
        for r, rec in enumerate(records):
            taus = [format(x, ".12g") for x in rec.times]
            taus += [""] * (n - 1 - len(taus))
            chain_txt = " < ".join(str(p) for p in rec.partitions)
            writer.writerow([r, chain_txt] + taus
                            + [rec.final_partition.num_blocks])
    print(f"wrote {path}")
    return 0


def _term_csv(path: str, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("term_order,value,std_error\n")
        for order, value, se in rows:
            fh.write(f"{order},{format(value, '.12g')},{format(se, '.12g')}\n")


def _grid_function(args, lo: float, hi: float, points: int):
    if args.f.endswith(".csv"):
        return sg.read_grid_function_csv(args.f)
    fn = harness.builtin_function_1d(args.f)
    grid = sg.Grid.regular(lo, hi, points)
    return sg.GridFunction.from_callable(grid, fn)


def _cmd_expand_stopped(args) -> int:
    out = _out_dir(args)
    f = _grid_function(args, 0.0, args.u + 8.0 * math.sqrt(args.t),
                       args.grid_points)
    cache = kv.PipelineKernelCache(sg.SemigroupSpec("absorbed"), 1.0, f,
                                   args.t, args.u, args.order)
    steps = int(round(args.t / args.dt))
    terms = np.empty((args.reps, args.order + 1))
    for lo, incs in noise.increment_chunks(args.reps, steps, 1, args.dt,
                                           args.seed):
        res = kv.stopped_wiener_series_batch(f, args.u, args.t, args.order,
                                             incs[:, :, 0], args.dt,
                                             cache=cache)
        terms[lo:lo + incs.shape[0]] = res.terms
    rows = [(k, float(terms[:, k].mean()),
             float(terms[:, k].std(ddof=1) / math.sqrt(args.reps))
             if args.reps > 1 else 0.0)
            for k in range(args.order + 1)]
    path = os.path.join(out, "expand_stopped.csv")
    _term_csv(path, rows)
    print(f"wrote {path}")
    return 0


def _cmd_expand_flat(args) -> int:
    out = _out_dir(args)
    w = 6.5 * math.sqrt(args.t) + 1.0
    f = _grid_function(args, args.u - w, args.u + w, args.grid_points)
    espec = kv.ExpansionSpec(sg.SemigroupSpec("heat"), b=args.b,
                             order=args.order, u=args.u, t=args.t)
    cache = kv.PipelineKernelCache(espec.semigroup, args.b, f, args.t,
                                   args.u, args.order)
    steps = int(round(args.t / args.dt))
    terms = np.empty((args.reps, args.order + 1))
    for lo, incs in noise.increment_chunks(args.reps, steps, 1, args.dt,
                                           args.seed):
        res = kv.theorem11_series_batch(espec, f, incs[:, :, 0], args.dt,
                                        cache=cache)
        terms[lo:lo + incs.shape[0]] = res.terms
    rows = [(k, float(terms[:, k].mean()),
             float(terms[:, k].std(ddof=1) / math.sqrt(args.reps))
             if args.reps > 1 else 0.0)
            for k in range(args.order + 1)]
    path = os.path.join(out, "expand_flat.csv")
    _term_csv(path, rows)
    print(f"wrote {path}")
    return 0


def _parse_matrix(text: str) -> np.ndarray:
    vals = [float(x) for x in text.split(",")]
    d = int(round(math.sqrt(len(vals))))
    if d * d != len(vals):
        raise SystemExit("--z needs d*d comma-separated entries")
    return np.array(vals).reshape(d, d)


def _cmd_expand_lie(args) -> int:
    out = _out_dir(args)
    z = _parse_matrix(args.z)
    rows = []
    per_order = {k: np.empty(args.reps) for k in range(args.order + 1)}
    for rep in range(args.reps):
        bundle = noise.sample_bundle(1, args.t, args.dt, args.seed,
                                     replica=rep)
        dw = bundle.increments()[0]
        per_order[0][rep] = math.sqrt(z.shape[0])  # ||I||_F
        zk = np.eye(z.shape[0])
        for k in range(1, args.order + 1):
            zk = zk @ z
            ik = float(noise.prefix_simplex_sum([dw] * k))
            per_order[k][rep] = float(np.linalg.norm(zk * ik))
    for k in range(args.order + 1):
        vals = per_order[k]
        se = float(vals.std(ddof=1) / math.sqrt(args.reps)) if args.reps > 1 else 0.0
        rows.append((k, float(vals.mean()), se))
    path = os.path.join(out, "expand_lie.csv")
    _term_csv(path, rows)
    print(f"wrote {path}")
    return 0


def _cmd_expand_npoint(args) -> int:
    out = _out_dir(args)
    starts = [float(x) for x in args.starts.split(",")]
    rule = _load_rule(args.rule)
    fn = harness.builtin_function_nd(args.f)
    total, ests = kv.theorem31_order0(fn, starts, rule, args.t, args.reps,
                                      args.seed, args.dt)
    se0 = math.sqrt(sum(e.std_error ** 2 for e in ests))
    rows = [(0, total, se0)]
    if args.order >= 1:
        n = len(starts)
        bundle = noise.sample_bundle(n, args.t, args.dt, args.seed + 1)
        value = kv.theorem31_series(fn, starts, rule, args.t, 1,
                                    bundle=bundle, reps=args.reps,
                                    seed=args.seed, dt=args.dt)
        rows.append((1, value - total, 0.0))
    path = os.path.join(out, "expand_npoint.csv")
    _term_csv(path, rows)
    print(f"wrote {path}")
    for e in ests:
        print(f"chain {e.chain}: {e.value:.6g} +- {e.std_error:.2g}")
    return 0


def _cmd_verify(args) -> int:
    overrides = {}
    if args.config:
        overrides = harness.parse_config_file(args.config)
    out = args.out or os.environ.get("KVCHAOS_OUT", "out")
    name = overrides.pop("experiment", args.experiment)
    seed = overrides.pop("seed", args.seed)
    overrides.pop("out_dir", None)
    rows = harness.run_named(name, seed=seed, out_dir=out,
                             overrides=overrides)
    failed = 0
    for r in rows:
        print(f"[{r.status:>6}] {r.experiment}: {r.quantity} "
              f"(estimate={r.estimate:.6g}, oracle={r.oracle:.6g}, "
              f"tol={r.tolerance:.6g})")
        failed += r.status == "fail"
    print(f"{'FAIL' if failed else 'PASS'}: "
          f"{len(rows) - failed}/{len(rows)} rows passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kvchaos", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enumerate-partitions",
                       help="list partition chains in canonical text form")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--class", dest="klass", default="Rbreve",
                   choices=["R", "Rk", "Rbreve"])
    p.add_argument("--k", type=int, default=None,
                   help="stationary-pair count for class Rk")
    p.add_argument("--max-length", type=int, default=None,
                   help="chain length cap (required for class R)")
    p.set_defaults(func=_cmd_enumerate)

    p = sub.add_parser("simulate-flow", help="simulate the n-point motion")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--starts", required=True,
                   help="comma-separated sorted start points")
    p.add_argument("--rule", default="leader",
                   help="sequential | leader | uniform | file:PATH")
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--no-bridge", action="store_true",
                   help="disable the Brownian-bridge coalescence correction")
    _add_common(p)
    p.set_defaults(func=_cmd_simulate_flow)

    p = sub.add_parser("expand-stopped",
                       help="stopped-Wiener chaos series term statistics")
    p.add_argument("--f", default="min2", help="builtin name or CSV file")
    p.add_argument("--u", type=float, default=1.0)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("-K", "--order", type=int, default=3)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--grid-points", type=int, default=901)
    _add_common(p)
    p.set_defaults(func=_cmd_expand_stopped)

    p = sub.add_parser("expand-flat",
                       help="flat-case chaos series term statistics")
    p.add_argument("--f", default="cubic", help="builtin name or CSV file")
    p.add_argument("--u", type=float, default=0.5)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("-K", "--order", type=int, default=3)
    p.add_argument("--b", type=float, default=1.0,
                   help="constant generator coefficient")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--grid-points", type=int, default=1401)
    _add_common(p)
    p.set_defaults(func=_cmd_expand_flat)

    p = sub.add_parser("expand-lie",
                       help="matrix-group series term statistics")
    p.add_argument("--z", default="0,1,-1,0",
                   help="row-major comma-separated square matrix")
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("-K", "--order", type=int, default=6)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--dt", type=float, default=1e-3)
    _add_common(p)
    p.set_defaults(func=_cmd_expand_lie)

    p = sub.add_parser("expand-npoint",
                       help="n-point expansion orders 0 and 1")
    p.add_argument("--starts", default="0,1")
    p.add_argument("--rule", default="leader")
    p.add_argument("--f", default="sum")
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--order", type=int, default=0, choices=[0, 1])
    p.add_argument("--reps", type=int, default=20000)
    p.add_argument("--dt", type=float, default=1e-2)
    _add_common(p)
    p.set_defaults(func=_cmd_expand_npoint)

    p = sub.add_parser("verify", help="run the acceptance suite")
    p.add_argument("--config", default=None,
                   help="flat key=value config file")
    p.add_argument("--experiment", default="verify",
                   help="single experiment name (default: all)")
    _add_common(p)
    p.set_defaults(func=_cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

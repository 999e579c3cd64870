"""Command line entry point: ``semilin solve|sweep|baseline|report``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys


def _threads():
    n = os.environ.get("SEMILIN_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _values(raw):
    out = []
    for tok in raw.split(","):
        tok = tok.strip()
        try:
            out.append(int(tok))
        except ValueError:
            try:
                out.append(float(tok))
            except ValueError:
                out.append(tok)
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(prog="semilin", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("solve", help="train and evaluate one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override output directory")
    p.add_argument("--run-index", type=int, default=0)

    p = sub.add_parser("sweep", help="sweep one axis with repeats")
    p.add_argument("--config", required=True)
    p.add_argument("--axis")
    p.add_argument("--values", type=_values)
    p.add_argument("--repeats", type=int)
    p.add_argument("--out", help="override output directory")

    p = sub.add_parser("baseline", help="Monte Carlo reference at (0, X0)")
    p.add_argument("--problem", required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache", help="baseline cache file")

    p = sub.add_parser("report", help="aggregate results into CSV and figures")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    limiter = _threads()
    try:
        return _dispatch(args)
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def _dispatch(args):
    from . import harness

    if args.cmd in ("solve", "sweep"):
        cfg = harness.ExperimentConfig.load(args.config)
        if args.out:
            cfg = cfg.replace(output_dir=args.out)
        if args.cmd == "solve":
            try:
                res = harness.run(cfg, run_index=args.run_index)
            except harness.RunFailed as exc:
                print(str(exc), file=sys.stderr)
                return 2
            print(json.dumps(res.report.to_json(), default=float))
            return 0
        results = harness.sweep(cfg, axis=args.axis, values=args.values, repeats=args.repeats)
        failed = sum(r.status != "ok" for r in results)
        print(f"{len(results)} runs, {failed} failed, results in {cfg.output_dir}")
        return 1 if failed == len(results) else 0
    if args.cmd == "baseline":
        from .pdes import BaselineCache, make_problem, mc_baseline

        prob = make_problem(args.problem, args.d, T=args.T)
        if args.cache:
            res, _ = BaselineCache(args.cache).get_or_compute(prob, args.samples, args.seed)
        else:
            res = mc_baseline(prob, args.samples, seed=args.seed)
        print(json.dumps(res.to_json(), default=float))
        return 0
    if args.cmd == "report":
        results = harness.load_results(args.in_dir)
        if not results:
            print(f"no results found under {args.in_dir}", file=sys.stderr)
            return 1
        for p in harness.report(results, args.out, figures=not args.no_figures):
            print(p)
        return 0
    return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``run``, ``certify``, ``summarize`` and ``gen-env``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (PROFILES, load_config, make_environment, read_csv, run_grid, summarize,
                      summary_fields, with_overrides, write_csv, certify)


def _config(args):
    return load_config(args.config, profile=args.profile)


def cmd_run(args) -> int:
    methods = args.methods.split(",") if args.methods else None
    cfg = with_overrides(_config(args), out_dir=args.out_dir, root_seed=args.root_seed,
                         methods=methods, beta=args.beta, workers=args.workers)
    rows = run_grid(cfg)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} rows written to {Path(cfg.out_dir) / 'results.csv'} ({failed} failed)")
    return 0


def cmd_certify(args) -> int:
    report = certify(_config(args), trials=args.trials)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    for check in report.checks:
        if not check.passed:
            print(f"FAIL {check.name}: lhs={check.lhs:.6g} rhs={check.rhs:.6g} tol={check.tol:.3g}")
    print(f"{len(report.checks)} checks, {len(report.failures())} failed")
    return 0 if report.passed else 1


def cmd_summarize(args) -> int:
    summary = summarize(read_csv(args.input))
    write_csv(args.output, summary, summary_fields())
    print(f"{len(summary)} summary rows written to {args.output}")
    return 0


def cmd_gen_env(args) -> int:
    env = make_environment(_config(args))
    env.save(args.out)
    tv_avg, tv_max = env.tv_stats
    print(json.dumps({"out": args.out, "n_states": env.P1.n_states, "tau_b": env.tau_b,
                      "shift_magnitude": env.shift_magnitude, "tv_avg": tv_avg, "tv_max": tv_max}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reward-transfer",
                                     description="Modular and coupled reward transfer experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="key = value config file")
        p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
        return p

    run = with_config(sub.add_parser("run", help="run the experiment grid"))
    run.add_argument("--out-dir")
    run.add_argument("--root-seed", type=int)
    run.add_argument("--methods", help="comma-separated subset of modular,coupled,coupled_offset")
    run.add_argument("--beta", type=float)
    run.add_argument("--workers", type=int)
    run.set_defaults(func=cmd_run)

    cert = with_config(sub.add_parser("certify", help="run the numerical certificates"))
    cert.add_argument("--trials", type=int, default=100)
    cert.add_argument("--out", help="write the certificate report as JSON")
    cert.set_defaults(func=cmd_certify)

    summ = sub.add_parser("summarize", help="aggregate a results CSV")
    summ.add_argument("--in", dest="input", required=True)
    summ.add_argument("--out", dest="output", required=True)
    summ.set_defaults(func=cmd_summarize)

    gen = with_config(sub.add_parser("gen-env", help="generate and save an environment"))
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_env)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end for the stage campaign.

Exit code 0 if and only if every registered criterion in the executed scope
passed; stages that are expected to fail their registered rule (the
unconstrained S1 fit, the anytime band ceilings in S7) therefore produce a
nonzero exit by design.
"""

from __future__ import annotations

import argparse
import sys

from . import harness


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftlab",
        description="constrained density-ratio fitting with pre-registered "
                    "verdict artifacts")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one pre-registered stage")
    p_run.add_argument("--stage", required=True, metavar="S0..S7")
    p_run.add_argument("--config", required=True, help="TOML run config")
    p_run.add_argument("--out", default=None, help="artifact directory "
                       "(overrides the config)")

    p_sweep = sub.add_parser("sweep", help="run a range of stages in order")
    p_sweep.add_argument("--stages", default="S0:S7",
                         help="inclusive range like S0:S7 or a comma list")
    p_sweep.add_argument("--config", required=True, help="TOML run config")
    p_sweep.add_argument("--out", default=None)

    p_report = sub.add_parser("report",
                              help="summarize artifacts in a directory")
    p_report.add_argument("--dir", required=True)

    p_csv = sub.add_parser("csv", help="fit a ratio to two CSV samples "
                           "(NO-ORACLE mode, no registered criteria)")
    p_csv.add_argument("--source", required=True)
    p_csv.add_argument("--target", required=True)
    p_csv.add_argument("--config", required=True, help="TOML config; the "
                       "[csv] table declares loss_column and fit options")
    p_csv.add_argument("--out", default=None)
    return parser


def _print_stage(report: dict) -> None:
    stage = report["stage"]
    for c in report["criteria"]:
        verdict = "PASS" if c["passed"] else "FAIL"
        print(f"[{stage}] {c['id']}: value {c['value']:.6g} "
              f"({harness._limit_text(c)}) -> {verdict}")
    if not report["criteria"]:
        print(f"[{stage}] no registered criteria "
              f"({report.get('label', 'annotations only')})")
    print(f"[{stage}] stage verdict: "
          f"{'PASS' if report['passed'] else 'FAIL'}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "report":
        text, ok = harness.summarize(args.dir)
        print(text)
        return 0 if ok else 1

    config = harness.load_config(args.config)

    if args.command == "csv":
        out_dir = args.out if args.out is not None else config["run"]["out_dir"]
        report = harness.run_csv_mode(args.source, args.target, config,
                                      out_dir=out_dir)
        _print_stage(report)
        q = report["quantities"]
        print(f"[CSV] mean weight {q['mean_weight']:.6g}, "
              f"ess fraction {q['ess_fraction']:.6g}")
        cert = report["annotations"].get("certificates")
        if cert is not None:
            print(f"[CSV] weighted loss {cert['emp_weighted_loss']:.6g}, "
                  f"sqrt bound {cert['sqrt_bound']:.6g}, "
                  f"bernoulli-kl bound {cert['bernoulli_kl_bound']:.6g}")
        return 0

    ctx = harness.make_context(config, args.out)
    if args.command == "run":
        stages = harness.parse_stage_range(args.stage)
    else:
        stages = harness.parse_stage_range(args.stages)
    ok = True
    for stage in stages:
        report = harness.run_stage(ctx, stage)
        _print_stage(report)
        ok = ok and report["passed"]
    print(f"artifacts in {ctx.out_dir}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())

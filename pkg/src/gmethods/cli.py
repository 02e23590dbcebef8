"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import pandas as pd

from . import __version__
from .dgm import (CalibrationError, Scenario, calibrate_alpha, first_stage_scenarios, second_stage_scenarios,
                  true_estimands)
from .engine import ExperimentPlan, read_records, run_experiment
from .estimators import Method
from .metrics import summaries_frame, summarize, zipper_data
from .report import DatasetProfile, analyze_data, load_dataset, profile_data, recommend

log = logging.getLogger("gmethods")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_csv(df: pd.DataFrame, path: Path):
    df.to_csv(path, index=False, lineterminator="\n", float_format=None)
    log.info("wrote %s", path)


def _sidecar(path: Path, args, extra=None):
    info = {"version": __version__, "seed": args.seed, "command": args.command}
    if extra:
        info.update(extra)
    side = path.with_suffix(path.suffix + ".manifest.json")
    side.write_text(json.dumps(info, indent=2, default=str) + "\n")


def _grid(name):
    if name == "first":
        return list(first_stage_scenarios())
    if name == "second":
        return list(second_stage_scenarios())
    raise UsageError(f"unknown grid {name!r}")


def _scenarios_from_args(args):
    if args.plan:
        return list(ExperimentPlan.load(args.plan).scenarios)
    if args.grid:
        scen = _grid(args.grid)
        if args.label:
            scen = [s for s in scen if s.label in set(args.label)]
            if not scen:
                raise UsageError("no scenario matches --label")
        return scen
    if args.alpha1 is None:
        raise UsageError("give --plan, --grid or explicit --alpha0/--alpha1/--beta0/--beta1")
    a2 = args.alpha1 if args.alpha2 is None else args.alpha2
    return [Scenario(args.alpha0, args.alpha1, a2, args.beta0, args.beta1, args.n)]


def cmd_calibrate(args):
    rows = []
    for ov in args.ps_ov:
        for tp in args.treated:
            c = calibrate_alpha(ov, tp, eval_n=args.eval_n, seed=args.seed)
            rows.append({"target_ps_ov": ov, "target_treated": tp, **asdict(c)})
            print(f"PS-OV {ov:g}%, treated {tp:g}: alpha0={c.alpha0:.4f} alpha1=alpha2={c.alpha1:.4f} "
                  f"(achieved PS-OV {c.ps_ov:.2f}, treated {c.treated_prop:.4f})")
    out = args.out_dir / "calibration.csv"
    _write_csv(pd.DataFrame(rows), out)
    _sidecar(out, args, {"eval_n": args.eval_n})


def _truth_frame(scenarios, superpop_n, seed):
    rows = []
    for s in scenarios:
        t = true_estimands(s, superpop_n=superpop_n, seed=seed)
        rows.append({"scenario_label": s.label, **asdict(t)})
    return pd.DataFrame(rows)


def cmd_truth(args):
    df = _truth_frame(_scenarios_from_args(args), args.superpop_n, args.seed)
    for r in df.itertuples():
        print(f"{r.scenario_label}: PS-OV {r.ps_ov:.2f}%, treated {r.treated_prop:.4f}, "
              f"ATE RD {r.ate_rd:.5f}, ATT RD {r.att_rd:.5f}")
    out = args.out_dir / "truths.csv"
    _write_csv(df, out)
    _sidecar(out, args, {"superpop_n": args.superpop_n})


def cmd_plan(args):
    scen = _scenarios_from_args(args)
    plan = ExperimentPlan(scen, nsim=args.nsim, methods=args.methods, estimands=args.estimands,
                          scales=args.scales, base_seed=args.seed)
    out = args.out or args.out_dir / "plan.json"
    plan.save(out)
    print(f"wrote plan with {len(scen)} scenarios x {args.nsim} iterations to {out}")


def cmd_simulate(args):
    plan = ExperimentPlan.load(args.plan)
    if args.seed_override:
        plan = ExperimentPlan.from_dict({**plan.to_dict(), "base_seed": args.seed})
    out = args.out_dir / "raw_results.csv"
    counts = run_experiment(plan, out_csv=out, workers=args.workers, manifest_path=args.out_dir / "manifest.json")
    print(f"{counts['records']} iterations, {counts['rows']} rows -> {out}")
    print("zero-event iterations: " + ", ".join(f"{k}={v}" for k, v in counts["zero_event"].items()))


def cmd_summarize(args):
    records = read_records(args.records)
    truths = pd.read_csv(args.truths)
    summ = summaries_frame(summarize(records, truths))
    _write_csv(summ, args.out_dir / "summary.csv")
    _write_csv(zipper_data(records, truths), args.out_dir / "zipper.csv")
    it = records.drop_duplicates(["scenario_label", "iteration"])
    zero = it.groupby(["scenario_label", "zero_event"]).size().unstack(fill_value=0)
    zero.reset_index().to_csv(args.out_dir / "zero_events.csv", index=False, lineterminator="\n")
    _sidecar(args.out_dir / "summary.csv", args, {"records": str(args.records), "truths": str(args.truths)})
    print(f"summarized {len(it)} iterations into {len(summ)} cells")


def _dataset(args):
    return load_dataset(args.data, outcome=args.outcome, treatment=args.treatment)


def cmd_analyze(args):
    data = _dataset(args)
    prof = profile_data(data)
    table = analyze_data(data, estimands=args.estimands, scales=args.scales)
    print(json.dumps(prof.to_dict(), indent=2))
    with pd.option_context("display.width", 160, "display.max_columns", 20):
        print(table.to_string(index=False))
    _write_csv(table, args.out_dir / "analysis.csv")
    _write_csv(pd.DataFrame([prof.to_dict()]), args.out_dir / "profile.csv")
    _sidecar(args.out_dir / "analysis.csv", args, {"data": str(args.data)})


def cmd_recommend(args):
    if args.data:
        prof = profile_data(_dataset(args))
    else:
        missing = [f for f in ("n", "treated_prop", "outcome_prev", "ps_ov") if getattr(args, f) is None]
        if missing:
            raise UsageError("give --data or all of --n --treated-prop --outcome-prev --ps-ov")
        prof = DatasetProfile(args.n, args.treated_prop, args.outcome_prev, args.ps_ov,
                              args.conditional_log_or if args.conditional_log_or is not None else float("nan"))
    recs = [recommend(prof, e).to_dict() for e in args.estimands]
    print(json.dumps({"profile": prof.to_dict(), "recommendations": recs}, indent=2))


def build_parser() -> argparse.ArgumentParser:
    def global_opts(parser, suppress):
        # accepted before or after the subcommand; the subcommand copy only
        # overrides when given
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--seed", type=int, default=d(2024), help="base random seed")
        parser.add_argument("--workers", type=int, default=d(1), help="worker processes for simulate")
        parser.add_argument("--out-dir", type=Path, default=d(Path(".")), help="directory for outputs")
        parser.add_argument("--superpop-n", type=int, default=d(10**7), help="superpopulation size for truths")
        parser.add_argument("-v", "--verbose", action="store_true", default=d(False))

    p = _Parser(prog="gmethods", description=__doc__.splitlines()[0] if __doc__ else None)
    global_opts(p, suppress=False)
    p.add_argument("--version", action="version", version=f"gmethods {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    global_opts(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    def scenario_opts(sp):
        sp.add_argument("--plan", type=Path, help="plan JSON whose scenarios to use")
        sp.add_argument("--grid", choices=["first", "second"], help="built-in scenario grid")
        sp.add_argument("--label", nargs="+", help="restrict the grid to these labels")
        sp.add_argument("--alpha0", type=float, default=0.0)
        sp.add_argument("--alpha1", type=float)
        sp.add_argument("--alpha2", type=float)
        sp.add_argument("--beta0", type=float, default=0.0)
        sp.add_argument("--beta1", type=float, default=0.0)
        sp.add_argument("--n", type=int, default=1000)

    def selection_opts(sp, scales_default):
        sp.add_argument("--methods", nargs="+", default=[m.value for m in Method], choices=[m.value for m in Method])
        sp.add_argument("--estimands", nargs="+", default=["ATE", "ATT"], choices=["ATE", "ATT"])
        sp.add_argument("--scales", nargs="+", default=scales_default, choices=["RD", "OR"])

    sp = sub.add_parser("calibrate", help="solve for alpha given PS-OV and treated-share targets")
    sp.add_argument("--ps-ov", type=float, nargs="+", required=True)
    sp.add_argument("--treated", type=float, nargs="+", default=[0.5])
    sp.add_argument("--eval-n", type=int, default=10**6)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("truth", help="true estimands of scenarios in a superpopulation")
    scenario_opts(sp)
    sp.set_defaults(func=cmd_truth)

    sp = sub.add_parser("plan", help="write an experiment plan JSON")
    scenario_opts(sp)
    selection_opts(sp, ["RD", "OR"])
    sp.add_argument("--nsim", type=int, required=True)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="run a plan and write raw results")
    sp.add_argument("--plan", type=Path, required=True)
    sp.add_argument("--seed-override", action="store_true", help="replace the plan's base_seed with --seed")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("summarize", help="performance summaries from raw results and truths")
    sp.add_argument("--records", type=Path, required=True)
    sp.add_argument("--truths", type=Path, required=True)
    sp.set_defaults(func=cmd_summarize)

    def data_opts(sp, required):
        sp.add_argument("--data", type=Path, required=required)
        sp.add_argument("--outcome", default="Y")
        sp.add_argument("--treatment", default="A")

    sp = sub.add_parser("analyze", help="profile a dataset and run all four estimators")
    data_opts(sp, True)
    selection_opts(sp, ["OR"])
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("recommend", help="recommended estimators for a dataset or profile")
    data_opts(sp, False)
    sp.add_argument("--n", type=int)
    sp.add_argument("--treated-prop", type=float)
    sp.add_argument("--outcome-prev", type=float)
    sp.add_argument("--ps-ov", type=float, help="percentage, 0-100")
    sp.add_argument("--conditional-log-or", type=float)
    sp.add_argument("--estimands", nargs="+", default=["ATE", "ATT"], choices=["ATE", "ATT"])
    sp.set_defaults(func=cmd_recommend)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        args.func(args)
    except UsageError as exc:
        print(f"gmethods: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, FileNotFoundError, CalibrationError, pd.errors.ParserError,
            pd.errors.EmptyDataError, json.JSONDecodeError) as exc:
        print(f"gmethods: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"gmethods: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

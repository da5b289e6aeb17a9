"""Command-line front end: ``delayid {simulate,identify,online,montecarlo}``.

Exit codes: 0 success, 2 invalid scenario or arguments, 3 numerical
failure (divergence, unobservable or ill-conditioned delay), 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .batch import EstimateReport
from .errors import NUMERICAL_ERRORS, CoverageError, DelayIdError, ScenarioError
from .experiments import TrialError, run_montecarlo
from .online import OnlineResult
from .scenarios import PRESETS, Dataset, Scenario, estimate, load_scenario
from .signals import TimeSeries, simulate

logger = logging.getLogger("delayid")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
ROUND_TRIP_SPAN = 30.0


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _format_params(params: dict[str, float]) -> str:
    return "  ".join(f"{k}={v:.6g}" for k, v in params.items())


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    data = sc.generate(args.seed)
    out = _out_dir(args)
    data.u.to_csv(out / "u.csv")
    data.x[0].to_csv(out / "x.csv")
    data.y.to_csv(out / "y.csv")
    if sc.output is not None:
        # the input was reconstructed from a closed-form trajectory: re-simulate it
        span = min(ROUND_TRIP_SPAN, sc.horizon)
        x_sim = simulate(sc.system, data.u, span)[0]
        err = float(np.max(np.abs(x_sim.values - data.x[0].values[: len(x_sim)])))
        logger.info("round trip over [0, %g] s: max |x_sim - x| = %.3g", span, err)
    print(f"wrote u.csv, x.csv, y.csv to {out}")
    return EXIT_OK


def _load_data(sc: Scenario, args) -> Dataset:
    if args.y or args.u:
        if not (args.y and args.u):
            raise ScenarioError("--y and --u must be given together")
        y, u = TimeSeries.from_csv(args.y), TimeSeries.from_csv(args.u)
        return Dataset(u, [y], y)
    return sc.generate(args.seed)


def cmd_identify(args) -> int:
    sc = load_scenario(args.scenario)
    if sc.kind == "online" and not args.two_delay:
        raise ScenarioError(f"{sc.name} is an online scenario; use the 'online' subcommand")
    data = _load_data(sc, args)
    result = estimate(sc, data, two_delay=args.two_delay, refine=args.refine or sc.refine)
    linear, refined = result if isinstance(result, tuple) else (result, None)
    out = _out_dir(args)
    linear.write_json(out / "report.json")
    linear.write_trace_csv(out / "trace.csv")
    print(f"{linear.status}: {_format_params(linear.params())}")
    if refined is not None:
        refined.write_json(out / "report_refined.json")
        print(f"refined ({refined.status}): " + _format_params({f"{k}*": v for k, v in refined.params().items()}))
    return EXIT_NUMERICAL if linear.status == "diverged" else EXIT_OK


def cmd_online(args) -> int:
    sc = load_scenario(args.scenario, online=True)
    if sc.kind != "online":
        raise ScenarioError(f"{sc.name} is a batch scenario; use the 'identify' subcommand")
    data = sc.generate(args.seed)
    result: OnlineResult = estimate(sc, data)
    out = _out_dir(args)
    result.write_csv(out / "online_log.csv")
    last = result.at(result.t[-1])
    print(f"wrote online_log.csv to {out}; final: {_format_params(last)}")
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    sc = load_scenario(args.scenario)
    seeds = sc.seed_list(args.trials)
    if len(seeds) < 2:
        raise ScenarioError("Monte Carlo needs at least 2 trials")
    sigmas = [args.sigma] if args.sigma is not None else (sc.sigmas or [sc.noise])
    out = _out_dir(args)
    texts = []
    for sigma in sigmas:
        summary = run_montecarlo(sc, seeds, sigma, two_delay=args.two_delay, refine=args.refine or sc.refine,
                                 skip_failed=args.skip_failed, workers=args.workers)
        tag = f"sigma{sigma:g}"
        summary.write_csv(out / f"summary_{tag}.csv")
        summary.write_trials_csv(out / f"trials_{tag}.csv")
        texts.append(summary.to_text())
        print(texts[-1])
    (out / "summary.txt").write_text("\n\n".join(texts) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="delayid", description="Identify linear systems with input delay.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scenario", required=True,
                        help=f"JSON file or preset ({', '.join(PRESETS)})")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=".")

    sp = sub.add_parser("simulate", help="write u.csv, x.csv and y.csv for a scenario")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("identify", help="batch estimate from a scenario or from CSV data")
    common(sp)
    sp.add_argument("--y", help="output CSV (time,value); with --u replaces generated data")
    sp.add_argument("--u", help="input CSV (time,value)")
    sp.add_argument("--refine", action="store_true", help="polish with simulation-error least squares")
    sp.add_argument("--two-delay", action="store_true", help="use the two-delay model")
    sp.set_defaults(func=cmd_identify)

    sp = sub.add_parser("online", help="run the online estimator and write its log")
    common(sp)
    sp.set_defaults(func=cmd_online)

    sp = sub.add_parser("montecarlo", help="repeat estimation over noise seeds")
    common(sp)
    sp.add_argument("--trials", type=int, default=None)
    sp.add_argument("--sigma", type=float, default=None, help="override the noise level (else all scenario sigmas)")
    sp.add_argument("--refine", action="store_true")
    sp.add_argument("--two-delay", action="store_true")
    sp.add_argument("--skip-failed", action="store_true", help="exclude failed trials from the statistics")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_montecarlo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (*NUMERICAL_ERRORS, TrialError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (ScenarioError, CoverageError, ValueError, KeyError, json.JSONDecodeError) as exc:
        logger.error("invalid input: %s", exc)
        return EXIT_INVALID
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except DelayIdError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

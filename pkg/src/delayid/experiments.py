"""Monte Carlo over noise seeds: one clean record, many noisy outputs."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .batch import EstimateReport
from .errors import NUMERICAL_ERRORS, DelayIdError
from .online import OnlineResult
from .scenarios import Scenario, estimate

logger = logging.getLogger(__name__)


class TrialError(DelayIdError, ArithmeticError):
    """At least one Monte Carlo trial failed and failures were not to be skipped."""


def trial_params(result) -> dict[str, float]:
    """Flatten an estimator outcome into ``name -> value``.

    Refined batch estimates get a ``*`` suffix; online runs report their
    final logged values.
    """
    if isinstance(result, tuple):
        linear, refined = result
        out = trial_params(linear)
        out.update({f"{k}*": v for k, v in refined.params().items()})
        return out
    if isinstance(result, OnlineResult):
        last = result.at(result.t[-1])
        return {k: float(v) for k, v in last.items() if k != "t"}
    return result.params()


def _failed(result) -> str | None:
    reports = result if isinstance(result, tuple) else (result,)
    for r in reports:
        if isinstance(r, EstimateReport) and r.status == "diverged":
            return r.message or "diverged"
        if isinstance(r, EstimateReport) and not all(math.isfinite(v) for v in r.params().values()):
            return "non-finite estimate"
    return None


def run_trial(scenario: Scenario, clean, seed: int, sigma: float | None = None,
              two_delay: bool = False, refine: bool | None = None) -> tuple[int, dict | None, str | None]:
    data = scenario.generate(seed, sigma, clean)
    try:
        result = estimate(scenario, data, two_delay=two_delay, refine=refine)
    except NUMERICAL_ERRORS as exc:
        return seed, None, f"{type(exc).__name__}: {exc}"
    reason = _failed(result)
    if reason is not None:
        return seed, None, reason
    return seed, trial_params(result), None


@dataclass
class ExperimentSummary:
    scenario: str
    sigma: float
    mean: dict[str, float]
    std: dict[str, float]
    n: int
    trials: list[dict] = field(default_factory=list)
    failures: list[tuple[int, str]] = field(default_factory=list)
    wall_time: float = 0.0

    def rows(self) -> list[tuple[str, float, float, int]]:
        return [(k, self.mean[k], self.std[k], self.n) for k in self.mean]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param", "mean", "std", "n"])
            for k, m, s, n in self.rows():
                w.writerow([k, f"{m:.10g}", f"{s:.10g}", n])

    def write_trials_csv(self, path) -> None:
        names = list(self.mean)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "status"] + names)
            failed = dict(self.failures)
            for t in self.trials:
                w.writerow([t["seed"], "ok"] + [f"{t[k]:.10g}" for k in names])
            for seed, msg in sorted(failed.items()):
                w.writerow([seed, f"failed: {msg}"] + [""] * len(names))

    def to_text(self) -> str:
        lines = [f"{self.scenario}  sigma={self.sigma:g}  trials={self.n}  failed={len(self.failures)}"
                 f"  wall={self.wall_time:.1f}s",
                 f"{'param':>10} {'mean':>12} {'std':>12}"]
        lines += [f"{k:>10} {m:12.5g} {s:12.4g}" for k, m, s, _ in self.rows()]
        return "\n".join(lines)


def summarize(scenario: str, sigma: float, outcomes, skip_failed: bool, wall: float) -> ExperimentSummary:
    outcomes = sorted(outcomes, key=lambda o: o[0])
    failures = [(seed, msg) for seed, p, msg in outcomes if p is None]
    if failures and not skip_failed:
        seed, msg = failures[0]
        raise TrialError(f"{len(failures)} trial(s) failed, first seed {seed}: {msg} (use --skip-failed to exclude)")
    good = [dict(seed=seed, **p) for seed, p, _ in outcomes if p is not None]
    if len(good) < 2:
        raise TrialError(f"need at least 2 successful trials for statistics, got {len(good)}")
    names = [k for k in good[0] if k != "seed"]
    table = np.array([[t[k] for k in names] for t in good])
    mean = dict(zip(names, table.mean(axis=0).tolist()))
    std = dict(zip(names, table.std(axis=0, ddof=1).tolist()))
    return ExperimentSummary(scenario, sigma, mean, std, len(good), good, failures, wall)


def run_montecarlo(
    scenario: Scenario,
    seeds: list[int],
    sigma: float | None = None,
    two_delay: bool = False,
    refine: bool | None = None,
    skip_failed: bool = False,
    workers: int = 1,
) -> ExperimentSummary:
    """Estimate on ``len(seeds)`` noise draws and aggregate mean and std.

    Statistics are computed over trials sorted by seed, so they do not
    depend on the order in which (possibly parallel) trials finish.
    """
    if len(seeds) < 2:
        raise ValueError("Monte Carlo needs at least 2 trials")
    sigma = scenario.noise if sigma is None else sigma
    t0 = time.perf_counter()
    clean = scenario.clean()
    job = partial(run_trial, scenario, clean, sigma=sigma, two_delay=two_delay, refine=refine)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(job, seeds))
    else:
        outcomes = [job(s) for s in seeds]
    for seed, _, msg in outcomes:
        if msg:
            logger.warning("trial seed=%d failed: %s", seed, msg)
    return summarize(scenario.name, sigma, outcomes, skip_failed, time.perf_counter() - t0)

"""Scenario files: system, input, noise, sampling and estimator settings.

Scenarios are JSON documents (or the bundled presets below).  A scenario
generates one clean record (input ``u`` and state ``x``) and, per seed, a
noisy output ``y = x + noise``.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .batch import BatchConfig, EstimateReport, RefineConfig, TwoDelayConfig
from .batch import estimate_delay_iterative, estimate_two_delay, refine_nonlinear
from .errors import ScenarioError
from .modfun import ModulatingKernel, OneMinusCos, PolyPow, SinPow, Window
from .online import OnlineConfig, OnlineResult, run_online
from .signals import (
    Constant,
    NoiseSpec,
    PhaseModulatedCosine,
    Profile,
    Sinusoids,
    SystemSpec,
    TimeSeries,
    add_noise,
    invert_for_input,
    sample_expression,
    simulate,
)

_EX1_INPUT = {"kind": "phase_cosine", "amplitude": 60.0, "omega": 1.23, "sin_depth": 1.3, "cos_depth": -0.7}
_EX2_INPUT = {"kind": "phase_cosine", "amplitude": 60.0, "omega": 1.23, "sin_depth": 0.33, "cos_depth": -0.47}
_EX2_WINDOWS = {"start": 10.0, "step": 10.0, "length": 15.0, "count": 9}
_EX3_WINDOWS = {"start": 15.0, "step": 2.0, "length": 10.0, "count": 20}

PRESETS: dict[str, dict] = {
    "example1": {
        "system": {"coeffs": [-0.35, {"ramp": [-1.2, 30.0, -0.02]}], "gain": 2.0, "init": [20.0, 0.3]},
        "input": _EX1_INPUT,
        "noise": {"sigma": 5.0},
        "rate": 100.0,
        "horizon": 60.0,
        "estimator": {"kind": "online", "lam": 1.0, "gain": 1e-3, "delay": False},
    },
    "example2": {
        "system": {"coeffs": [-0.35, -1.2], "gain": 2.0, "input_delay": 4.0, "init": [20.0, 0.3]},
        "input": _EX2_INPUT,
        "noise": {"sigma": 1.0},
        "rate": 500.0,
        "horizon": 105.0,
        "estimator": {"kind": "batch", "variant": "sin2", "windows": _EX2_WINDOWS, "observe_window": [0.0, 15.0]},
    },
    "example3": {
        "system": {"coeffs": [-2.7, 0.0], "gain": 1.5, "input_delay": 4.0, "state_delay": 2.0},
        "output": {"kind": "sinusoids", "terms": [[3.0, 0.5, 0.0], [2.0, 1.0 / 3.0, math.pi / 2]]},
        "noise": {"sigma": 0.05},
        "rate": 500.0,
        "horizon": 70.0,
        "estimator": {"kind": "two_delay", "windows": _EX3_WINDOWS, "h_max": 5.0},
    },
    "example3-online": {
        "system": {"coeffs": [-0.35, -1.2], "gain": 2.0, "input_delay": 0.5, "init": [20.0, 0.3]},
        "input": _EX1_INPUT,
        "noise": {"sigma": 5.0},
        "rate": 100.0,
        "horizon": 60.0,
        "estimator": {"kind": "online", "lam": 1.0, "gain": 4e-3, "lam_h": 0.4, "T0": 14.0},
    },
    "example4": {
        "system": {"coeffs": [-0.35, -1.2], "gain": 2.0, "init": [20.0, 0.3],
                   "input_delay": {"times": [0.0], "values": [3.0], "tail_slope": 0.015}},
        "input": _EX1_INPUT,
        "noise": {"sigma": 5.0},
        "rate": 100.0,
        "horizon": 120.0,
        "estimator": {"kind": "online", "lam": 1.0, "gain": 4e-4, "lam_h": 0.4, "T0": 40.0, "h0": 3.6},
    },
}
PRESETS["table0"] = {**copy.deepcopy(PRESETS["example2"]), "sigmas": [1.0, 2.0, 5.0, 10.0], "trials": 100}
PRESETS["table1"] = {**copy.deepcopy(PRESETS["example2"]), "noise": {"sigma": 5.0}, "refine": True, "trials": 100}
PRESETS["table2"] = {**copy.deepcopy(PRESETS["example3"]), "sigmas": [0.025, 0.05, 0.1, 0.2], "trials": 100}

# the same example number names a two-delay batch case and an online delay case
ONLINE_ALIASES = {"example3": "example3-online"}


@dataclass
class Dataset:
    u: TimeSeries
    x: list[TimeSeries]
    y: TimeSeries


@dataclass
class Scenario:
    name: str
    system: SystemSpec
    input: Any
    output: Any
    noise: float
    rate: float
    horizon: float
    input_start: float
    estimator: dict
    sigmas: list[float] = field(default_factory=list)
    trials: int = 100
    refine: bool = False
    seeds: list[int] | None = None

    @property
    def dt(self) -> float:
        return 1.0 / self.rate

    @property
    def kind(self) -> str:
        return self.estimator["kind"]

    def seed_list(self, trials: int | None = None) -> list[int]:
        if trials is None and self.seeds is not None:
            return list(self.seeds)
        return list(range(trials if trials is not None else self.trials))

    def clean(self) -> tuple[TimeSeries, list[TimeSeries]]:
        """Noise-free input (from ``input_start``) and state (from 0)."""
        dt = self.dt
        count_x = int(round(self.horizon / dt)) + 1
        count_u = int(round((self.horizon - self.input_start) / dt)) + 1
        if self.output is not None:
            u = invert_for_input(self.system, self.output, self.input_start, dt, count_u)
            x = [sample_expression(self.output.derivative(k) if k else self.output, 0.0, dt, count_x)
                 for k in range(self.system.order)]
            return u, x
        u = sample_expression(self.input, self.input_start, dt, count_u)
        x = simulate(self.system, self.input, self.horizon, dt)
        return u, x

    def generate(self, seed: int = 0, sigma: float | None = None, clean=None) -> Dataset:
        u, x = clean if clean is not None else self.clean()
        s = self.noise if sigma is None else sigma
        return Dataset(u, x, add_noise(x[0], NoiseSpec(s, seed)))

    def windows(self) -> list[Window]:
        return parse_windows(self.estimator.get("windows"))

    def batch_config(self) -> BatchConfig:
        e = self.estimator
        kernels = e.get("kernels")
        ow = e.get("observe_window")
        return BatchConfig(
            n=self.system.order, variant=e.get("variant", "sin2"), k=int(e.get("k", 1)),
            kernels=tuple(parse_kernel(k) for k in kernels) if kernels else None,
            h0=float(e.get("h0", 0.0)), max_iter=int(e.get("max_iter", 50)), tol=float(e.get("tol", 1e-6)),
            observe_window=tuple(ow) if ow else None,
        )

    def two_delay_config(self) -> TwoDelayConfig:
        e = self.estimator
        h_max = e.get("h_max")
        return TwoDelayConfig(
            h0=tuple(e.get("h0", (0.0, 0.0))), max_iter=int(e.get("max_iter", 10)), tol=float(e.get("tol", 1e-6)),
            h_max=None if h_max is None else float(h_max), grid=int(e.get("grid", 3)),
            probe_iter=int(e.get("probe_iter", 3)),
        )

    def online_config(self) -> OnlineConfig:
        e = {k: v for k, v in self.estimator.items() if k != "kind"}
        e.setdefault("n", self.system.order)
        try:
            return OnlineConfig(**e)
        except TypeError as exc:
            raise ScenarioError(f"{self.name}: bad online estimator settings: {exc}") from None


def estimate(scenario: Scenario, data: Dataset, two_delay: bool = False, refine: bool | None = None):
    """Run the scenario's estimator on ``data``.

    Returns an :class:`EstimateReport` (plus the refined one when requested)
    or an :class:`OnlineResult`.
    """
    kind = "two_delay" if two_delay else scenario.kind
    if kind == "online":
        return run_online(data.y, data.u, scenario.online_config())
    if kind == "two_delay":
        return estimate_two_delay(data.y, data.u, scenario.windows(), scenario.two_delay_config())
    report = estimate_delay_iterative(data.y, data.u, scenario.windows(), scenario.batch_config())
    if refine if refine is not None else scenario.refine:
        return report, refine_nonlinear(data.y, data.u, report, RefineConfig())
    return report


# ---------------------------------------------------------------------------
# parsing


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ScenarioError(f"{where}: missing field {key!r}")
    return d[key]


def parse_profile(v, where: str = "profile") -> Profile:
    if isinstance(v, (int, float)):
        return Profile.constant(float(v))
    if isinstance(v, dict) and "ramp" in v:
        value, start, slope = v["ramp"]
        return Profile.ramp(value, start, slope)
    if isinstance(v, dict):
        try:
            return Profile(tuple(map(float, _require(v, "times", where))),
                           tuple(map(float, _require(v, "values", where))), float(v.get("tail_slope", 0.0)))
        except ValueError as exc:
            raise ScenarioError(f"{where}: {exc}") from None
    raise ScenarioError(f"{where}: expected a number, a ramp or a breakpoint table, got {v!r}")


def parse_signal(d: dict | None, where: str):
    if d is None:
        return None
    kind = _require(d, "kind", where)
    if kind == "phase_cosine":
        return PhaseModulatedCosine(*(float(_require(d, k, where)) for k in ("amplitude", "omega", "sin_depth", "cos_depth")))
    if kind == "sinusoids":
        return Sinusoids(tuple(tuple(map(float, term)) for term in _require(d, "terms", where)))
    if kind == "constant":
        return Constant(float(d.get("value", 0.0)))
    raise ScenarioError(f"{where}: unknown signal kind {kind!r}")


_KERNELS = {"SinPow": SinPow, "PolyPow": PolyPow}


def parse_kernel(name: str) -> ModulatingKernel:
    """``"SinPow(3)"``, ``"PolyPow(2)"`` or ``"OneMinusCos"``."""
    if name == "OneMinusCos":
        return OneMinusCos()
    head, _, rest = name.partition("(")
    if head in _KERNELS and rest.endswith(")"):
        return _KERNELS[head](int(rest[:-1]))
    raise ScenarioError(f"unknown kernel {name!r}")


def parse_windows(v) -> list[Window]:
    if v is None:
        raise ScenarioError("estimator: missing field 'windows'")
    try:
        if isinstance(v, dict):
            return [Window(v["start"] + i * v["step"], v["start"] + i * v["step"] + v["length"])
                    for i in range(int(v["count"]))]
        return [Window(float(a), float(b)) for a, b in v]
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"estimator.windows: {exc}") from None


def _initial_state(output, n: int):
    # a closed-form trajectory fixes the initial state (and the history)
    if output is None or n == 0:
        return None
    return tuple(float((output.derivative(k) if k else output)(0.0)) for k in range(n))


def scenario_from_dict(d: dict, name: str = "scenario") -> Scenario:
    output = parse_signal(d.get("output"), f"{name}.output")
    inp = parse_signal(d.get("input"), f"{name}.input")
    sysd = _require(d, "system", name)
    try:
        system = SystemSpec(
            coeffs=tuple(parse_profile(c, f"{name}.system.coeffs") for c in _require(sysd, "coeffs", f"{name}.system")),
            gain=parse_profile(_require(sysd, "gain", f"{name}.system"), f"{name}.system.gain"),
            input_delay=parse_profile(sysd.get("input_delay", 0.0), f"{name}.system.input_delay"),
            state_delay=float(sysd.get("state_delay", 0.0)),
            init=sysd.get("init", _initial_state(output, len(sysd.get("coeffs", ())))),
            history=output,
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"{name}.system: {exc}") from None
    if (output is None) == (inp is None):
        raise ScenarioError(f"{name}: give exactly one of 'input' or 'output'")
    rate, horizon = float(_require(d, "rate", name)), float(_require(d, "horizon", name))
    if not (rate > 0 and horizon > 0):
        raise ScenarioError(f"{name}: rate and horizon must be positive")
    if rate * horizon > 5e7:
        raise ScenarioError(f"{name}: {rate * horizon:.3g} samples exceed the memory budget")
    start = float(d.get("input_start", -10.0))
    if abs(start * rate - round(start * rate)) > 1e-6:
        raise ScenarioError(f"{name}: input_start must lie on the sample grid")
    estimator = dict(_require(d, "estimator", name))
    kind = _require(estimator, "kind", f"{name}.estimator")
    if kind not in ("batch", "two_delay", "online"):
        raise ScenarioError(f"{name}.estimator: unknown kind {kind!r}")
    if kind != "online":
        parse_windows(estimator.get("windows"))
        for k in estimator.get("kernels") or ():
            parse_kernel(k)
    noise = d.get("noise", {})
    seeds = d.get("seeds")
    sc = Scenario(
        name=name, system=system, input=inp, output=output, noise=float(noise.get("sigma", 0.0)),
        rate=rate, horizon=horizon, input_start=start, estimator=estimator,
        sigmas=[float(s) for s in d.get("sigmas", [])], trials=int(d.get("trials", 100)),
        refine=bool(d.get("refine", False)), seeds=None if seeds is None else [int(s) for s in seeds],
    )
    if sc.noise < 0 or any(s < 0 for s in sc.sigmas):
        raise ScenarioError(f"{name}: noise sigma must be >= 0")
    if kind == "online":
        sc.online_config()
    return sc


def load_scenario(ref: str, online: bool = False) -> Scenario:
    """Load a preset by name or a JSON file by path."""
    if online and ref in ONLINE_ALIASES:
        ref = ONLINE_ALIASES[ref]
    if ref in PRESETS:
        return scenario_from_dict(copy.deepcopy(PRESETS[ref]), ref)
    path = Path(ref)
    if not path.exists():
        raise FileNotFoundError(f"no preset or file named {ref!r} (presets: {', '.join(PRESETS)})")
    text = path.read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(d, dict):
        raise ScenarioError(f"{path}: top level must be an object")
    return scenario_from_dict(d, path.stem)


def preset_json(name: str) -> str:
    return json.dumps(PRESETS[name], indent=2)

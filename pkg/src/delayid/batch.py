"""Post-hoc identification over a set of windows.

Every window ``[T1, T2]`` and kernel ``f`` gives one linear equation in the
unknown coefficients, obtained by integrating the system against
``f((tau - T1) / L)`` and moving all derivatives onto the kernel.  Stacking
windows gives an overdetermined system solved by least squares.

The delay enters through the input.  Shifting the kernel instead of the
input, ``int f(theta) u(tau - d) dtau ~ int f(theta + d/L) u(tau) dtau``, turns
an unknown delay into extra linear unknowns: Taylor coefficients
``b_l = b d**l`` or, for trigonometric kernels, ``b*cos``/``b*sin`` pairs.
The residual delay read from them is fed back by re-shifting the input and
solving again until it stops moving.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DivergenceError,
    IllConditionedDelayError,
    KernelContractError,
    OutOfRangeError,
    UnobservableDelayError,
)
from .modfun import (
    Cos2,
    ModulatingKernel,
    ObserverKernel,
    OneMinusCos,
    Sin2,
    SinPow,
    Window,
    check_annihilation,
    snap_window,
    window_integrals,
)
from .signals import SystemSpec, TimeSeries, shift, simulate

logger = logging.getLogger(__name__)


@dataclass
class RegressionSystem:
    C: np.ndarray
    D: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.D = np.asarray(self.D, dtype=float).ravel()
        if self.C.shape[0] != self.D.size or self.C.shape[1] != len(self.labels):
            raise ValueError("C, D and labels have inconsistent shapes")

    @classmethod
    def stack(cls, systems: Sequence["RegressionSystem"]) -> "RegressionSystem":
        return cls(np.vstack([s.C for s in systems]), np.concatenate([s.D for s in systems]),
                   systems[0].labels)

    def residual(self, theta) -> float:
        return float(np.linalg.norm(self.C @ theta - self.D))


def solve_least_squares(system: RegressionSystem) -> tuple[np.ndarray, float]:
    """Column-scaled orthogonal (SVD) least squares; returns (theta, ||C theta - D||)."""
    C, D = system.C, system.D
    if C.shape[0] < C.shape[1]:
        raise ValueError(f"{C.shape[0]} equations for {C.shape[1]} unknowns")
    scale = np.linalg.norm(C, axis=0)
    scale[scale == 0] = 1.0
    sol, *_ = np.linalg.lstsq(C / scale, D, rcond=None)
    theta = sol / scale
    return theta, system.residual(theta)


def _require_same_grid(a: TimeSeries, b: TimeSeries) -> None:
    offset = (a.t0 - b.t0) / a.dt
    if abs(a.dt - b.dt) > 1e-12 * a.dt or abs(offset - round(offset)) > 1e-6:
        raise ValueError("output and input must share one sampling grid")


def _require_kernel(kernel: ModulatingKernel, order: int) -> None:
    if not check_annihilation(kernel, order):
        raise KernelContractError(f"{kernel!r} does not vanish to order {order} at both ends")


def _output_columns(y: TimeSeries, kernel, w: Window, n: int) -> tuple[np.ndarray, float, float]:
    """(-1)^i L^-i I_{y, f^(i)} for i < n, and the i = n right-hand side."""
    _, _, sw = snap_window(y, w)
    L = sw.length
    iy = window_integrals(y, [(kernel, i) for i in range(n + 1)], w)
    signs = np.array([(-1.0 / L) ** i for i in range(n + 1)])
    terms = signs * iy
    return terms[:n], terms[n], L


def build_delay_free_system(
    y: TimeSeries, u: TimeSeries, kernels: Sequence[ModulatingKernel], w: Window, n: int
) -> RegressionSystem:
    _require_same_grid(y, u)
    rows, rhs = [], []
    for kernel in kernels:
        _require_kernel(kernel, n)
        cols, d, _ = _output_columns(y, kernel, w, n)
        iu = window_integrals(u, [(kernel, 0)], w)
        rows.append(np.concatenate([cols, iu]))
        rhs.append(d)
    labels = tuple(f"a{i}" for i in range(n)) + ("b",)
    return RegressionSystem(np.array(rows), np.array(rhs), labels)


def build_taylor_delay_system(
    y: TimeSeries,
    u_shifted: TimeSeries,
    kernels: Sequence[ModulatingKernel],
    windows: Sequence[Window],
    n: int,
    k: int = 1,
) -> RegressionSystem:
    """Rows for every (window, kernel); unknowns ``(a_0..a_{n-1}, b_0..b_k)``.

    ``b_l`` stands for ``b * d**l`` where ``d`` is the delay still separating
    ``u_shifted`` from the true input term.
    """
    if k < 1:
        raise ValueError("truncation order k must be >= 1")
    _require_same_grid(y, u_shifted)
    rows, rhs = [], []
    for w in windows:
        for kernel in kernels:
            _require_kernel(kernel, max(n, k))
            cols, d, L = _output_columns(y, kernel, w, n)
            iu = window_integrals(u_shifted, [(kernel, l) for l in range(k + 1)], w)
            taylor = np.array([L**-l / math.factorial(l) for l in range(k + 1)])
            rows.append(np.concatenate([cols, taylor * iu]))
            rhs.append(d)
    labels = tuple(f"a{i}" for i in range(n)) + tuple(f"b{l}" for l in range(k + 1))
    return RegressionSystem(np.array(rows), np.array(rhs), labels)


def _common_length(y: TimeSeries, windows: Sequence[Window]) -> float:
    lengths = [snap_window(y, w)[2].length for w in windows]
    if max(lengths) - min(lengths) > 1e-9 * max(lengths):
        raise ValueError("trigonometric shift expansions need windows of one common length")
    return lengths[0]


def build_sin2_delay_system(
    y: TimeSeries, u_shifted: TimeSeries, windows: Sequence[Window], n: int = 2
) -> RegressionSystem:
    """Rows against ``sin(pi theta)**2`` with the shift expanded exactly.

    ``sin^2(pi(theta+e)) = sin^2(pi theta) + c1 cos(2 pi theta) + c2 sin(2 pi theta)``
    with ``c1 = (1 - cos 2 pi e)/2`` and ``c2 = sin(2 pi e)/2``, so the unknowns
    are ``(a_0..a_{n-1}, b0, b1, b2) = (..., b, b c1, b c2)``.
    """
    if n > 2:
        raise KernelContractError("sin^2 vanishes only to order 2 at the window ends")
    _require_same_grid(y, u_shifted)
    _common_length(y, windows)
    f, cos2, sin2 = SinPow(2), Cos2(), Sin2()
    rows, rhs = [], []
    for w in windows:
        cols, d, _ = _output_columns(y, f, w, n)
        iu = window_integrals(u_shifted, [(f, 0), (cos2, 0), (sin2, 0)], w)
        rows.append(np.concatenate([cols, iu]))
        rhs.append(d)
    labels = tuple(f"a{i}" for i in range(n)) + ("b0", "b1", "b2")
    return RegressionSystem(np.array(rows), np.array(rhs), labels)


def _check_gain(b0: float, theta: np.ndarray) -> None:
    if not abs(b0) > 1e-10 * np.max(np.abs(theta)):
        raise UnobservableDelayError(f"gain estimate {b0:.3g} vanishes; delay cannot be read")


def taylor_residual_delay(theta: np.ndarray, n: int) -> float:
    b0, b1 = theta[n], theta[n + 1]
    _check_gain(b0, theta)
    return b1 / b0


def sin2_residual_delay(theta: np.ndarray, n: int, length: float, norm_tol: float = 0.5) -> float:
    """Exact inverse of the sin^2 shift expansion (quadrant-resolved)."""
    b0, b1, b2 = theta[n : n + 3]
    _check_gain(b0, theta)
    c, s = 1.0 - 2.0 * b1 / b0, 2.0 * b2 / b0
    radius = math.hypot(c, s)
    if radius < 1e-12 or abs(radius - 1.0) > norm_tol:
        raise IllConditionedDelayError(
            f"shift coefficients ({b1:.3g}, {b2:.3g}) match no real delay (norm {radius:.3g})"
        )
    return length * math.atan2(s, c) / (2.0 * math.pi)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EstimateReport:
    """Outcome of an estimator.

    ``a_hat`` follows the system convention ``x^(n) = sum a_i x^(i) + b u(t-h)``
    except for the two-delay form, where it holds the single ``a`` of
    ``x'' + a x(t-h1) = b u(t-h2)`` and ``h_hat = (h1, h2)``.
    """

    a_hat: np.ndarray
    b_hat: float
    h_hat: tuple[float, ...]
    residual: float = float("nan")
    iterations: list[dict] = field(default_factory=list)
    status: str = "converged"
    x0: np.ndarray | None = None
    cost: float | None = None
    message: str = ""

    def params(self) -> dict[str, float]:
        """Flat name -> value mapping used for Monte Carlo summaries."""
        out = {f"a{i}": float(v) for i, v in enumerate(self.a_hat)}
        if len(self.a_hat) == 1 and len(self.h_hat) == 2:
            out = {"a": float(self.a_hat[0])}
        out["b"] = float(self.b_hat)
        if len(self.h_hat) == 1:
            out["h"] = float(self.h_hat[0])
        else:
            out.update({f"h{i + 1}": float(v) for i, v in enumerate(self.h_hat)})
        if self.x0 is not None:
            out.update({f"x0_{i}": float(v) for i, v in enumerate(self.x0)})
        return out

    def to_dict(self) -> dict:
        return {
            "a": [float(v) for v in self.a_hat],
            "b": float(self.b_hat),
            "h": [float(v) for v in self.h_hat],
            "x0": None if self.x0 is None else [float(v) for v in self.x0],
            "residual": float(self.residual),
            "cost": self.cost,
            "status": self.status,
            "message": self.message,
            "trace": self.iterations,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_trace_csv(self, path) -> None:
        base = ["iter", "h_hat", "b0", "b1", "residual"]
        extra = sorted({k for row in self.iterations for k in row} - set(base))
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=base + extra)
            writer.writeheader()
            for row in self.iterations:
                writer.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# iterative delay estimation


@dataclass
class BatchConfig:
    """Knobs for :func:`estimate_delay_iterative`.

    ``variant`` is ``"sin2"`` (exact trigonometric shift expansion) or
    ``"taylor"`` (order-``k`` Taylor columns against ``kernels``).  ``tol`` is
    relative to the window length.
    """

    n: int = 2
    variant: str = "sin2"
    k: int = 1
    kernels: tuple[ModulatingKernel, ...] | None = None
    h0: float = 0.0
    max_iter: int = 50
    tol: float = 1e-6
    norm_tol: float = math.inf
    observe_window: tuple[float, float] | None = None

    def taylor_kernels(self) -> tuple[ModulatingKernel, ...]:
        if self.kernels is not None:
            return tuple(self.kernels)
        m = max(self.n, self.k + 1)
        return (SinPow(m), SinPow(m + 1), SinPow(m + 2))


def _one_pass(y, u_shifted, windows, config: BatchConfig):
    n = config.n
    if config.variant == "sin2":
        system = build_sin2_delay_system(y, u_shifted, windows, n)
        theta, res = solve_least_squares(system)
        length = _common_length(y, windows)
        delta = sin2_residual_delay(theta, n, length, config.norm_tol)
    elif config.variant == "taylor":
        system = build_taylor_delay_system(y, u_shifted, config.taylor_kernels(), windows, n, config.k)
        theta, res = solve_least_squares(system)
        delta = taylor_residual_delay(theta, n)
    else:
        raise ValueError(f"unknown variant {config.variant!r}")
    return theta, res, delta


def estimate_delay_iterative(
    y: TimeSeries, u: TimeSeries, windows: Sequence[Window], config: BatchConfig | None = None
) -> EstimateReport:
    """Fixed-point delay refinement: shift ``u`` by the current estimate, solve, repeat."""
    config = config or BatchConfig()
    n = config.n
    tol = config.tol * min(w.length for w in windows)
    h = float(config.h0)
    trace: list[dict] = []
    theta = None
    status, message = "max-iterations", ""
    for it in range(config.max_iter):
        try:
            u_shifted = shift(u, h)
            theta, res, delta = _one_pass(y, u_shifted, windows, config)
        except OutOfRangeError as exc:
            status, message = "diverged", str(exc)
            break
        trace.append({"iter": it, "h_hat": h, "b0": float(theta[n]), "b1": float(theta[n + 1]),
                      "residual": res, "delta": float(delta)})
        h += float(delta)
        if not math.isfinite(h):
            status, message = "diverged", "delay estimate is not finite"
            break
        if abs(delta) < tol:
            status = "converged"
            break
    if theta is None:
        return EstimateReport(np.full(n, np.nan), math.nan, (h,), math.nan, trace, "diverged", message=message)
    report = EstimateReport(theta[:n].copy(), float(theta[n]), (h,), trace[-1]["residual"] if trace else math.nan,
                            trace, status, message=message)
    if config.observe_window is not None and status != "diverged":
        w = Window(*config.observe_window)
        report.x0 = observe_state(y, shift(u, h), report.a_hat, report.b_hat, w, at="left")
    logger.debug("delay iteration finished: %s after %d passes, h=%.6g", status, len(trace), h)
    return report


# ---------------------------------------------------------------------------
# two delays: x'' + a x(t - h1) = b u(t - h2)


@dataclass
class TwoDelayConfig:
    """Knobs for :func:`estimate_two_delay`.

    The iteration has spurious fixed points (e.g. sign-flipped gains with
    negative delays), so when an a-priori bound ``h_max`` is known the
    estimator probes a ``grid`` x ``grid`` lattice of starting delays in
    ``[0, h_max]`` for ``probe_iter`` passes each, keeps the admissible
    candidate that has settled best, and iterates on from there.  Without
    ``h_max`` it starts from ``h0`` alone.
    """

    h0: tuple[float, float] = (0.0, 0.0)
    max_iter: int = 10
    tol: float = 1e-6
    h_max: float | None = None
    grid: int = 3
    probe_iter: int = 3


def _two_delay_pass(y, x_shifted, u_shifted, windows, L):
    """Solve for ``(a, a s1, b, b s2)`` with ``s = sin(2 pi d / L)``."""
    f, sin2 = OneMinusCos(), Sin2()
    side = [(f, 0), (sin2, 0)]
    rows, rhs = [], []
    for w in windows:
        rhs.append(-window_integrals(y, [(f, 2)], w)[0] / L**2)
        ix = window_integrals(x_shifted, side, w)
        iu = window_integrals(u_shifted, side, w)
        rows.append(np.concatenate([ix, -iu]))
    system = RegressionSystem(np.array(rows), np.array(rhs), ("a", "a_s1", "b", "b_s2"))
    return solve_least_squares(system)


def _shift_angle(gain: float, gain_sine: float, channel: str) -> float:
    if not abs(gain) > 1e-10 * max(abs(gain), abs(gain_sine)):
        raise UnobservableDelayError(f"coefficient of the {channel} channel vanishes")
    s = gain_sine / gain
    if abs(s) > 1.0:
        raise IllConditionedDelayError(f"{channel} delay out of range: sine argument {s:.3g}")
    return math.asin(s)


def _iterate_two_delay(y, u, windows, L, h1, h2, max_iter, tol):
    trace: list[dict] = []
    status, message, theta = "max-iterations", "", None
    for it in range(max_iter):
        try:
            theta, res = _two_delay_pass(y, shift(y, h1), shift(u, h2), windows, L)
        except OutOfRangeError as exc:
            status, message = "diverged", str(exc)
            break
        d1 = L * _shift_angle(theta[0], theta[1], "state") / (2 * math.pi)
        d2 = L * _shift_angle(theta[2], theta[3], "input") / (2 * math.pi)
        trace.append({"iter": it, "h_hat": h2, "b0": float(theta[2]), "b1": float(theta[3]),
                      "residual": res, "h1_hat": h1, "a": float(theta[0]),
                      "step": max(abs(d1), abs(d2))})
        h1, h2 = h1 + d1, h2 + d2
        if max(abs(d1), abs(d2)) < tol * L:
            status = "converged"
            break
    return theta, (h1, h2), trace, status, message


def estimate_two_delay(
    y: TimeSeries, u: TimeSeries, windows: Sequence[Window], config: TwoDelayConfig | None = None
) -> EstimateReport:
    """Identify ``x'' + a x(t - h1) = b u(t - h2)`` against ``1 - cos(2 pi theta)``.

    Shifting the kernel by ``d`` adds ``sin(2 pi d/L) sin(2 pi theta)`` to it
    (up to second order), so each channel contributes a gain and a
    gain-times-sine unknown; ``y`` and ``u`` are re-shifted by the running
    delay estimates between passes.
    """
    config = config or TwoDelayConfig()
    _require_same_grid(y, u)
    L = _common_length(y, windows)
    h1, h2 = map(float, config.h0)
    if config.h_max is not None:
        h1, h2 = _best_start(y, u, windows, L, config)
    theta, h, trace, status, message = _iterate_two_delay(
        y, u, windows, L, h1, h2, config.max_iter, config.tol)
    if theta is None:
        return EstimateReport(np.array([math.nan]), math.nan, h, math.nan, trace, "diverged", message=message)
    return EstimateReport(np.array([theta[0]]), float(theta[2]), h, trace[-1]["residual"],
                          trace, status, message=message)


def _best_start(y, u, windows, L, config: TwoDelayConfig) -> tuple[float, float]:
    best, best_step = None, math.inf
    grid = np.linspace(0.0, config.h_max, config.grid)
    for s1 in grid:
        for s2 in grid:
            try:
                _, h, trace, status, _ = _iterate_two_delay(
                    y, u, windows, L, s1, s2, config.probe_iter, config.tol)
            except (IllConditionedDelayError, UnobservableDelayError):
                continue
            if status == "diverged" or not trace:
                continue
            if not all(0.0 <= v <= config.h_max for v in h):
                continue
            if trace[-1]["step"] < best_step:
                best, best_step = h, trace[-1]["step"]
    if best is None:
        raise IllConditionedDelayError(f"no admissible delay pair in [0, {config.h_max:g}]")
    return best


# ---------------------------------------------------------------------------
# state observation


def observe_state(
    y: TimeSeries,
    u_shifted: TimeSeries,
    a: Sequence[float],
    b: float,
    w: Window,
    lam: float = 0.0,
    at: str = "right",
) -> np.ndarray:
    """Estimate ``(x, x', ..., x^(n-1))`` at one end of ``w``.

    Uses ``n`` kernels vanishing to order ``n`` at the far end and to order
    ``j`` at the observed end; the boundary terms left by integration by
    parts form a triangular system in the unknown state.  ``lam`` weights
    the kernels toward the observed end.
    """
    n = len(a)
    coeffs = np.append(np.asarray(a, dtype=float), -1.0)
    _require_same_grid(y, u_shifted)
    _, _, sw = snap_window(y, w)
    L = sw.length
    right = at == "right"
    if at not in ("right", "left"):
        raise ValueError("at must be 'right' or 'left'")
    theta_end = 1.0 if right else 0.0
    sign_end = 1.0 if right else -1.0
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    for j in range(n):
        g = ObserverKernel(n, j, rate=lam * L, mirrored=not right)
        iy = window_integrals(y, [(g, i) for i in range(n + 1)], w)
        iu = window_integrals(u_shifted, [(g, 0)], w)[0]
        bulk = sum(coeffs[i] * (-1.0 / L) ** i * iy[i] for i in range(n + 1))
        rhs[j] = -(bulk + b * iu)
        for ell in range(n):
            for i in range(ell + 1, n + 1):
                r = i - 1 - ell
                A[j, ell] += sign_end * coeffs[i] * (-1.0) ** r * L**-r * float(g.derivative(r, theta_end))
    if not np.linalg.cond(A) < 1e12:
        raise KernelContractError("observer boundary system is singular")
    return np.linalg.solve(A, rhs)


# ---------------------------------------------------------------------------
# simulation-error refinement


@dataclass
class RefineConfig:
    max_iter: int = 30
    max_retries: int = 12
    ftol: float = 1e-10
    damping: float = 1e-3


def _simulation_residual(p, n, y, u, mask):
    a, b, h, x0 = p[:n], p[n], p[n + 1], p[n + 2 :]
    if h < 0:
        return None
    spec = SystemSpec(coeffs=tuple(a), gain=b, input_delay=h, init=tuple(x0))
    try:
        x = simulate(spec, u, y.t_end, y.dt)[0].values
    except (DivergenceError, OutOfRangeError, ValueError):
        return None
    r = (y.values - x)[mask]
    return r if np.all(np.isfinite(r)) else None


def refine_nonlinear(
    y: TimeSeries, u: TimeSeries, init: EstimateReport, config: RefineConfig | None = None
) -> EstimateReport:
    """Polish ``init`` by minimising the simulation error ``sum (y - x_sim)^2``.

    Damped Gauss-Newton (Levenberg-Marquardt) with forward-difference
    sensitivities over the coefficients, gain, delay and initial state.
    ``y`` must start at t = 0 and ``u`` must reach back past ``-h``.
    """
    config = config or RefineConfig()
    if abs(y.t0) > 1e-9:
        raise ValueError("refinement simulates from t=0; y must start there")
    n = len(init.a_hat)
    x0 = init.x0 if init.x0 is not None else np.r_[y.values[0], np.zeros(n - 1)]
    p = np.concatenate([init.a_hat, [init.b_hat, init.h_hat[0]], x0]).astype(float)
    lo, hi = y.valid
    mask = np.zeros(len(y), dtype=bool)
    mask[lo:hi] = True

    def fun(q):
        return _simulation_residual(q, n, y, u, mask)

    r = fun(p)
    if r is None:
        return _unchanged(init, "initial parameters do not simulate")
    cost = float(r @ r)
    cost0, mu, improved_ever = cost, None, False
    status = "max-iterations"
    for _ in range(config.max_iter):
        J = np.empty((r.size, p.size))
        for i in range(p.size):
            step = 1e-7 * max(abs(p[i]), 1.0)
            q = p.copy()
            q[i] += step
            rq = fun(q)
            if rq is None:
                q[i] -= 2 * step
                rq = fun(q)
                step = -step
            if rq is None:
                return _unchanged(init, "sensitivities unavailable", cost0)
            J[:, i] = (rq - r) / step
        H, g = J.T @ J, J.T @ r
        diag = np.diag(H).copy()
        diag[diag == 0] = 1.0
        if mu is None:
            mu = config.damping
        accepted = False
        for _ in range(config.max_retries):
            try:
                dp = -np.linalg.solve(H + mu * np.diag(diag), g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            r_new = fun(p + dp)
            if r_new is not None and float(r_new @ r_new) < cost:
                accepted = True
                break
            mu *= 10
        if not accepted:
            status = "converged" if improved_ever else "no-improvement"
            break
        improved_ever = True
        new_cost = float(r_new @ r_new)
        p, r = p + dp, r_new
        mu = max(mu / 10, 1e-12)
        done = cost - new_cost <= config.ftol * cost
        cost = new_cost
        if done:
            status = "converged"
            break
    if not improved_ever:
        return _unchanged(init, "cost did not decrease", cost0)
    return EstimateReport(p[:n].copy(), float(p[n]), (float(p[n + 1]),), math.sqrt(cost),
                          init.iterations, status, x0=p[n + 2 :].copy(), cost=cost)


def _unchanged(init: EstimateReport, message: str, cost: float | None = None) -> EstimateReport:
    return EstimateReport(init.a_hat.copy(), init.b_hat, init.h_hat, init.residual, init.iterations,
                          "no-improvement", x0=init.x0, cost=cost, message=message)

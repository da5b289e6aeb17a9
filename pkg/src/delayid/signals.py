"""Sampled signals, closed-form test signals, noise, shifting and DDE simulation.

Everything here is built on :class:`TimeSeries`, a uniformly sampled real
signal that also records which of its samples are *valid*.  Shifting a
series by a delay makes the first few samples depend on data we never had;
those samples stay in the array (so lengths line up) but fall outside the
valid range, and any window that touches them raises
:class:`~delayid.errors.OutOfRangeError`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numba
import numpy as np

from .errors import (
    CoverageError,
    DivergenceError,
    NonInvertibleError,
    OutOfRangeError,
    SamplingError,
)

# Tolerance (in samples) when deciding whether a time sits on the grid.
_GRID_EPS = 1e-9


@dataclass(frozen=True)
class TimeSeries:
    t0: float
    dt: float
    values: np.ndarray
    valid: tuple[int, int] | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        values = np.array(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise SamplingError(f"non-finite sample at t={self.t0 + bad * self.dt:.6g}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        lo, hi = self.valid if self.valid is not None else (0, values.size)
        lo, hi = max(int(lo), 0), min(int(hi), values.size)
        if hi <= lo:
            raise OutOfRangeError("series has no valid samples")
        object.__setattr__(self, "valid", (lo, hi))

    def __len__(self):
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.values.size)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (self.values.size - 1)

    @property
    def valid_span(self) -> tuple[float, float]:
        lo, hi = self.valid
        return self.t0 + lo * self.dt, self.t0 + (hi - 1) * self.dt

    def position(self, t):
        """Fractional sample index of time(s) ``t``."""
        return (np.asarray(t, dtype=float) - self.t0) / self.dt

    def require(self, t_lo: float, t_hi: float) -> None:
        """Raise OutOfRangeError unless [t_lo, t_hi] lies in the valid span."""
        lo, hi = self.valid_span
        tol = _GRID_EPS * self.dt + 1e-12 * max(abs(lo), abs(hi), 1.0)
        if t_lo < lo - tol or t_hi > hi + tol:
            raise OutOfRangeError(
                f"invalid index: [{t_lo:.6g}, {t_hi:.6g}] outside valid data [{lo:.6g}, {hi:.6g}]"
            )

    def at(self, t) -> np.ndarray:
        """Evaluate the series at arbitrary times by 4-point cubic interpolation."""
        t = np.asarray(t, dtype=float)
        if t.size:
            self.require(float(t.min()), float(t.max()))
        lo, hi = self.valid
        return _lagrange4(self.values, lo, hi, self.position(t))

    def with_values(self, values) -> "TimeSeries":
        return TimeSeries(self.t0, self.dt, values, self.valid)

    def to_csv(self, path: Union[str, Path]) -> None:
        data = np.column_stack([self.times, self.values])
        np.savetxt(path, data, delimiter=",", header="time,value", comments="", fmt="%.15g")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "TimeSeries":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t, v = data[:, 0], data[:, 1]
        if t.size < 2:
            raise SamplingError(f"{path}: need at least two rows")
        dt = (t[-1] - t[0]) / (t.size - 1)
        if np.max(np.abs(np.diff(t) - dt)) > 1e-6 * dt:
            raise SamplingError(f"{path}: time column is not uniformly spaced")
        return cls(float(t[0]), float(dt), v)


def _lagrange4(values: np.ndarray, lo: int, hi: int, pos) -> np.ndarray:
    # stencil clamped inside [lo, hi) so the edges use one-sided cubic stencils
    pos = np.asarray(pos, dtype=float)
    if hi - lo < 4:
        raise OutOfRangeError("cubic interpolation needs at least 4 valid samples")
    i0 = np.clip(np.floor(pos).astype(np.int64) - 1, lo, hi - 4)
    x = pos - i0
    w0 = -(x - 1) * (x - 2) * (x - 3) / 6
    w1 = x * (x - 2) * (x - 3) / 2
    w2 = -x * (x - 1) * (x - 3) / 2
    w3 = x * (x - 1) * (x - 2) / 6
    return w0 * values[i0] + w1 * values[i0 + 1] + w2 * values[i0 + 2] + w3 * values[i0 + 3]


# ---------------------------------------------------------------------------
# closed-form signals


@dataclass(frozen=True)
class Sinusoids:
    """Sum of ``amplitude * sin(omega * t + phase)`` terms, differentiable exactly."""

    terms: tuple[tuple[float, float, float], ...]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for amp, omega, phase in self.terms:
            out = out + amp * np.sin(omega * t + phase)
        return out

    def derivative(self, order: int = 1) -> "Sinusoids":
        return Sinusoids(tuple(
            (amp * omega**order, omega, phase + order * math.pi / 2)
            for amp, omega, phase in self.terms
        ))


@dataclass(frozen=True)
class PhaseModulatedCosine:
    """``amplitude * cos(omega*t + sin_depth*sin(t) + cos_depth*cos(t/2))``.

    This is the input family used by all the scalar-delay examples.
    """

    amplitude: float
    omega: float
    sin_depth: float
    cos_depth: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.amplitude * np.cos(
            self.omega * t + self.sin_depth * np.sin(t) + self.cos_depth * np.cos(0.5 * t)
        )


@dataclass(frozen=True)
class Constant:
    value: float = 0.0

    def __call__(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.value)

    def derivative(self, order: int = 1) -> "Constant":
        return self if order == 0 else Constant(0.0)


EXAMPLE1_INPUT = PhaseModulatedCosine(60.0, 1.23, 1.3, -0.7)
EXAMPLE2_INPUT = PhaseModulatedCosine(60.0, 1.23, 0.33, -0.47)
EXAMPLE3_OUTPUT = Sinusoids(((3.0, 0.5, 0.0), (2.0, 1.0 / 3.0, math.pi / 2)))


def sample_expression(expr: Callable, t0: float, dt: float, count: int) -> TimeSeries:
    if not dt > 0 or count < 1:
        raise ValueError("need dt > 0 and count >= 1")
    t = t0 + dt * np.arange(count)
    values = np.broadcast_to(np.asarray(expr(t), dtype=float), t.shape)
    bad = ~np.isfinite(values)
    if bad.any():
        raise SamplingError(f"expression is not finite at t={t[np.argmax(bad)]:.6g}")
    return TimeSeries(t0, dt, values)


# ---------------------------------------------------------------------------
# noise and shifting


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def add_noise(ts: TimeSeries, spec: NoiseSpec) -> TimeSeries:
    if spec.sigma == 0:
        return ts
    rng = np.random.default_rng(spec.seed)
    return ts.with_values(ts.values + rng.normal(0.0, spec.sigma, size=len(ts)))


def shift(ts: TimeSeries, delay: float) -> TimeSeries:
    """Return the series ``t -> ts(t - delay)`` on the same grid.

    Samples whose source time falls outside ``ts``'s valid span are left out
    of the valid range of the result.
    """
    steps = delay / ts.dt
    lo, hi = ts.valid
    n = len(ts)
    k = round(steps)
    if abs(steps - k) < _GRID_EPS:
        out = np.empty(n)
        idx = np.clip(np.arange(n) - k, lo, hi - 1)
        out[:] = ts.values[idx]
        return TimeSeries(ts.t0, ts.dt, out, (lo + k, hi + k))
    pos = np.arange(n) - steps
    new_lo = max(int(math.ceil(lo + steps - _GRID_EPS)), 0)
    new_hi = min(int(math.floor(hi - 1 + steps + _GRID_EPS)) + 1, n)
    if new_hi <= new_lo:
        raise OutOfRangeError(f"invalid index: shift by {delay:.6g} leaves no valid samples")
    out = _lagrange4(ts.values, lo, hi, np.clip(pos, lo, hi - 1))
    return TimeSeries(ts.t0, ts.dt, out, (new_lo, new_hi))


def rescale_time(ts: TimeSeries, factor: float) -> TimeSeries:
    """Relabel time as ``factor * t`` (the samples are untouched)."""
    return TimeSeries(ts.t0 * factor, ts.dt * factor, ts.values, ts.valid)


# ---------------------------------------------------------------------------
# systems


@dataclass(frozen=True)
class Profile:
    """Piecewise-linear function of time.

    Constant before the first breakpoint; after the last one it continues
    with ``tail_slope``.
    """

    times: tuple[float, ...]
    values: tuple[float, ...]
    tail_slope: float = 0.0

    def __post_init__(self):
        if len(self.times) != len(self.values) or not self.times:
            raise ValueError("profile needs matching, non-empty times and values")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("profile breakpoints must increase")

    @classmethod
    def constant(cls, value: float) -> "Profile":
        return cls((0.0,), (float(value),))

    @classmethod
    def ramp(cls, value: float, start: float, slope: float) -> "Profile":
        """``value`` until ``start``, then ``value + slope * (t - start)``."""
        return cls((float(start),), (float(value),), float(slope))

    @property
    def is_constant(self) -> bool:
        return self.tail_slope == 0 and len(set(self.values)) == 1

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.interp(t, self.times, self.values)
        return out + self.tail_slope * np.maximum(t - self.times[-1], 0.0)


ProfileLike = Union[float, Profile]


def as_profile(p: ProfileLike) -> Profile:
    return p if isinstance(p, Profile) else Profile.constant(float(p))


@dataclass(frozen=True)
class SystemSpec:
    """``x^(n)(t) = a_0 x(t - h1) + sum_{i>=1} a_i x^(i)(t) + b u(t - h)``.

    With ``state_delay == 0`` this is the plain input-delay system.  The
    two-delay form ``x'' + a x(t-h1) = b u(t-h2)`` is ``coeffs=(-a, 0)``.
    """

    coeffs: tuple[Profile, ...]
    gain: Profile
    input_delay: Profile = field(default_factory=lambda: Profile.constant(0.0))
    state_delay: float = 0.0
    init: tuple[float, ...] | None = None
    history: Callable | None = None

    def __post_init__(self):
        coeffs = tuple(as_profile(c) for c in self.coeffs)
        if not coeffs:
            raise ValueError("order must be >= 1")
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "gain", as_profile(self.gain))
        object.__setattr__(self, "input_delay", as_profile(self.input_delay))
        init = tuple(self.init) if self.init is not None else (0.0,) * len(coeffs)
        if len(init) != len(coeffs):
            raise ValueError(f"need {len(coeffs)} initial values, got {len(init)}")
        object.__setattr__(self, "init", init)
        if self.state_delay < 0 or min(self.input_delay.values) < 0:
            raise ValueError("delays must be >= 0")

    @property
    def order(self) -> int:
        return len(self.coeffs)

    def max_input_delay(self, t_end: float) -> float:
        ts = np.array(self.input_delay.times + (t_end,))
        return float(np.max(self.input_delay(ts)))


@numba.njit(cache=True)
def _delayed(buf, top, pos):
    i0 = int(math.floor(pos)) - 1
    if i0 > top - 3:
        i0 = top - 3
    if i0 < 0:
        i0 = 0
    x = pos - i0
    return (-(x - 1) * (x - 2) * (x - 3) / 6 * buf[i0] + x * (x - 2) * (x - 3) / 2 * buf[i0 + 1]
            - x * (x - 1) * (x - 3) / 2 * buf[i0 + 2] + x * (x - 1) * (x - 2) / 6 * buf[i0 + 3])


@numba.njit(cache=True)
def _deriv(s, coef, forcing, j, xdel, out):
    n = s.shape[0]
    for i in range(n - 1):
        out[i] = s[i + 1]
    acc = forcing[j] + coef[0, j] * xdel
    for i in range(1, n):
        acc += coef[i, j] * s[i]
    out[n - 1] = acc


@numba.njit(cache=True)
def _rk4_companion(coef, forcing, x0, dt, delay_steps, buf, head, guard):
    # coef/forcing live on the half-step grid; buf[head + k] holds x at step k
    n = x0.shape[0]
    N = (forcing.shape[0] - 1) // 2
    out = np.empty((n, N + 1))
    s = x0.copy()
    out[:, 0] = s
    buf[head] = s[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    delayed = delay_steps > 0
    for k in range(N):
        top = head + k
        p = head + k - delay_steps
        xd = _delayed(buf, top, p) if delayed else s[0]
        _deriv(s, coef, forcing, 2 * k, xd, k1)
        for i in range(n):
            tmp[i] = s[i] + 0.5 * dt * k1[i]
        xd = _delayed(buf, top, p + 0.5) if delayed else tmp[0]
        _deriv(tmp, coef, forcing, 2 * k + 1, xd, k2)
        for i in range(n):
            tmp[i] = s[i] + 0.5 * dt * k2[i]
        xd = _delayed(buf, top, p + 0.5) if delayed else tmp[0]
        _deriv(tmp, coef, forcing, 2 * k + 1, xd, k3)
        for i in range(n):
            tmp[i] = s[i] + dt * k3[i]
        xd = _delayed(buf, top, p + 1.0) if delayed else tmp[0]
        _deriv(tmp, coef, forcing, 2 * k + 2, xd, k4)
        for i in range(n):
            s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if not abs(s[i]) <= guard:
                return out[:, : k + 1], k + 1
        out[:, k + 1] = s
        buf[head + k + 1] = s[0]
    return out, -1


def simulate(
    spec: SystemSpec,
    u: Union[TimeSeries, Callable],
    t_end: float,
    dt: float | None = None,
    guard: float = 1e12,
) -> list[TimeSeries]:
    """Integrate the system from t=0 to ``t_end`` with fixed-step RK4.

    ``u`` is either a sampled input (evaluated off-grid by cubic
    interpolation) or a vectorised callable.  Returns ``[x, x', ..., x^(n-1)]``.
    """
    if dt is None:
        if not isinstance(u, TimeSeries):
            raise ValueError("dt is required when u is a callable")
        dt = u.dt
    n_steps = int(round(t_end / dt))
    tau = 0.5 * dt * np.arange(2 * n_steps + 1)
    shifted = tau - spec.input_delay(tau)
    if isinstance(u, TimeSeries):
        try:
            u_vals = u.at(shifted)
        except Exception as exc:
            raise CoverageError(
                f"input covers [{u.valid_span[0]:.6g}, {u.valid_span[1]:.6g}], "
                f"simulation needs [{shifted.min():.6g}, {shifted.max():.6g}]"
            ) from exc
    else:
        u_vals = np.asarray(u(shifted), dtype=float)
    forcing = spec.gain(tau) * u_vals
    coef = np.vstack([c(tau) for c in spec.coeffs])

    h1 = float(spec.state_delay)
    head = int(math.ceil(h1 / dt)) + 4 if h1 > 0 else 4
    buf = np.zeros(head + n_steps + 1)
    if h1 > 0:
        t_hist = dt * np.arange(-head, 0)
        buf[:head] = spec.history(t_hist) if spec.history is not None else spec.init[0]
    out, fail = _rk4_companion(
        coef, forcing, np.array(spec.init, dtype=float), float(dt), h1 / dt, buf, head, guard
    )
    if fail >= 0:
        raise DivergenceError(f"trajectory exceeded {guard:g} at t={fail * dt:.6g}")
    return [TimeSeries(0.0, dt, row) for row in out]


def _derivative_source(x, order):
    if isinstance(x, TimeSeries):
        vals = x.values
        for _ in range(order):
            vals = np.gradient(vals, x.dt, edge_order=2)
        return x.with_values(vals).at
    return x.derivative(order) if order else x


def invert_for_input(
    spec: SystemSpec, x, t0: float, dt: float, count: int
) -> TimeSeries:
    """Input that makes ``x`` an exact trajectory of ``spec``.

    ``x`` is a closed-form signal with a ``derivative(k)`` method (exact) or a
    densely sampled TimeSeries (differentiated numerically).  Delays must be
    constant.
    """
    if not spec.input_delay.is_constant:
        raise NonInvertibleError("inversion needs a constant input delay")
    h = spec.input_delay.values[0]
    n = spec.order
    s = t0 + dt * np.arange(count)
    t = s + h
    gain = spec.gain(t)
    if np.any(gain == 0):
        raise NonInvertibleError("gain b vanishes; input cannot be reconstructed")
    rhs = _derivative_source(x, n)(t)
    for i in range(1, n):
        rhs = rhs - spec.coeffs[i](t) * _derivative_source(x, i)(t)
    rhs = rhs - spec.coeffs[0](t) * _derivative_source(x, 0)(t - spec.state_delay)
    return TimeSeries(t0, dt, rhs / gain)

"""Modulating kernels and windowed integrals against sampled signals.

Normalised kernels live on ``theta in [0, 1]`` and are applied to a window
``[T1, T2]`` through ``theta = (tau - T1) / (T2 - T1)``; their derivatives are
taken with respect to ``theta``.  The exponential family :class:`ExpPoly` is
written in absolute time-to-go ``s = T2 - tau`` and differentiated with
respect to ``tau``.

All derivatives are exact (trigonometric or polynomial closed forms); no
numerical differentiation happens anywhere in this module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from numpy.polynomial import Polynomial

from .errors import CapabilityError, OutOfRangeError
from .signals import TimeSeries, _GRID_EPS

MAX_DERIVATIVE_ORDER = 12
MIN_WINDOW_SAMPLES = 8


def _check_order(order: int) -> None:
    if not 0 <= order <= MAX_DERIVATIVE_ORDER:
        raise CapabilityError(
            f"derivative order {order} not supported (0..{MAX_DERIVATIVE_ORDER})"
        )


class ModulatingKernel:
    """Common interface; subclasses provide ``derivative`` and ``annihilation``."""

    normalized = True

    def derivative(self, order: int, theta) -> np.ndarray:
        raise NotImplementedError

    def scale(self, order: int) -> float:
        """Rough magnitude of the ``order``-th derivative, for zero tests."""
        return 1.0

    def boundary_orders(self) -> tuple[int, int]:
        """Number of derivatives vanishing at the (left, right) window ends."""
        raise NotImplementedError

    def on_window(self, order: int, t: np.ndarray, T1: float, T2: float) -> np.ndarray:
        return self.derivative(order, (t - T1) / (T2 - T1))


@dataclass(frozen=True)
class TrigKernel(ModulatingKernel):
    """Real part of ``sum_p c_p exp(i p pi theta)``."""

    name: str
    freqs: tuple[int, ...]
    coefs: tuple[complex, ...]

    def derivative(self, order, theta):
        _check_order(order)
        theta = np.asarray(theta, dtype=float)
        out = np.zeros(theta.shape, dtype=complex)
        for p, c in zip(self.freqs, self.coefs):
            if p == 0 and order > 0:
                continue
            out += c * (1j * p * math.pi) ** order * np.exp(1j * p * math.pi * theta)
        return out.real

    def scale(self, order):
        return sum(abs(c) * (abs(p) * math.pi) ** order for p, c in zip(self.freqs, self.coefs))

    @cached_property
    def _orders(self):
        return _count_vanishing(self)

    def boundary_orders(self):
        return self._orders

    def __repr__(self):
        return self.name


def SinPow(m: int) -> TrigKernel:
    """``sin(pi theta)**m`` expanded into exponentials."""
    if m < 1:
        raise ValueError("m must be >= 1")
    freqs, coefs = [], []
    for r in range(m + 1):
        freqs.append(m - 2 * r)
        coefs.append(math.comb(m, r) * (-1) ** r / (2j) ** m)
    return TrigKernel(f"SinPow({m})", tuple(freqs), tuple(coefs))


def OneMinusCos() -> TrigKernel:
    """``1 - cos(2 pi theta)``."""
    return TrigKernel("OneMinusCos", (0, 2, -2), (1.0, -0.5, -0.5))


def Cos2() -> TrigKernel:
    """``cos(2 pi theta)``; no boundary annihilation, used for shift expansions."""
    return TrigKernel("Cos2", (2, -2), (0.5, 0.5))


def Sin2() -> TrigKernel:
    """``sin(2 pi theta)``; no boundary annihilation, used for shift expansions."""
    return TrigKernel("Sin2", (2, -2), (-0.5j, 0.5j))


@dataclass(frozen=True)
class PolyKernel(ModulatingKernel):
    """Polynomial in theta (ascending coefficients), optionally times ``exp(rate * theta)``."""

    name: str
    coef: tuple[float, ...]
    rate: float = 0.0

    @property
    def poly(self) -> Polynomial:
        return Polynomial(self.coef)

    def _derivative_poly(self, order) -> Polynomial:
        # (P e^{r th})' = (P' + r P) e^{r th}
        p = self.poly
        for _ in range(order):
            p = p.deriv() + self.rate * p
        return p

    def derivative(self, order, theta):
        _check_order(order)
        theta = np.asarray(theta, dtype=float)
        out = self._derivative_poly(order)(theta)
        if self.rate:
            out = out * np.exp(self.rate * (theta - 1.0))
        return out

    def scale(self, order):
        return float(np.sum(np.abs(self._derivative_poly(order).coef))) or 1.0

    @cached_property
    def _orders(self):
        return _count_vanishing(self)

    def boundary_orders(self):
        return self._orders

    def __repr__(self):
        return self.name


def PolyPow(m: int) -> PolyKernel:
    """``theta**m (1 - theta)**m``."""
    p = Polynomial([0, 1]) ** m * Polynomial([1, -1]) ** m
    return PolyKernel(f"PolyPow({m})", tuple(p.coef))


def ObserverKernel(n: int, j: int, rate: float = 0.0, mirrored: bool = False) -> PolyKernel:
    """State-observer kernel.

    ``theta**n (1-theta)**j``: vanishes to order ``n`` at the left end and to
    order ``j`` at the right end, where its ``j``-th derivative is nonzero.
    ``mirrored`` swaps the two ends (to observe the state at ``T1``).  The
    optional ``exp(rate*(theta-1))`` weight emphasises the observed end.
    """
    left = Polynomial([0, 1]) ** n * Polynomial([1, -1]) ** j
    if mirrored:
        left = Polynomial([1, -1]) ** n * Polynomial([0, 1]) ** j
        return PolyKernel(f"ObserverKernel({n},{j},mirrored)", tuple(left.coef), -rate)
    return PolyKernel(f"ObserverKernel({n},{j})", tuple(left.coef), rate)


@dataclass(frozen=True)
class ExpPoly(ModulatingKernel):
    """``s**j exp(-lam s) / j!`` with ``s = T2 - tau`` (the running time is T2).

    With ``normalized=False`` the ``1/j!`` factor is dropped.  Derivatives
    are with respect to ``tau`` and follow ``g_j' = lam g_j - g_{j-1}``
    (``lam g_j - j g_{j-1}`` unnormalised).
    """

    j: int
    lam: float
    normalized: bool = True

    def _norm(self, k):
        return math.factorial(k) if self.normalized else 1.0

    def derivative(self, order, s):
        """Value of the ``order``-th tau-derivative at time-to-go ``s``."""
        _check_order(order)
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        decay = np.exp(-self.lam * s)
        for r in range(min(order, self.j) + 1):
            # r applications of the lowering part, order - r of the lam part
            k = self.j - r
            c = math.comb(order, r) * self.lam ** (order - r) * (-1) ** r
            c *= math.factorial(self.j) / math.factorial(k) / self._norm(self.j)
            out += c * s**k * decay
        return out

    def on_window(self, order, t, T1, T2):
        return self.derivative(order, T2 - t)

    def boundary_orders(self):
        # the left end is at -infinity, where everything decays
        return (MAX_DERIVATIVE_ORDER + 1, self.j)

    def scale(self, order):
        return (1.0 + self.lam) ** order

    def __repr__(self):
        return f"ExpPoly({self.j}, {self.lam:g})"


def _count_vanishing(kernel: ModulatingKernel) -> tuple[int, int]:
    counts = []
    for end in (0.0, 1.0):
        k = 0
        while k <= MAX_DERIVATIVE_ORDER and abs(
            float(kernel.derivative(k, end))
        ) <= 1e-12 * kernel.scale(k):
            k += 1
        counts.append(k)
    return tuple(counts)


def kernel_eval(kernel: ModulatingKernel, derivative_order: int, theta) -> np.ndarray:
    return kernel.derivative(derivative_order, theta)


def check_annihilation(kernel: ModulatingKernel, order: int) -> bool:
    """True when derivatives ``0..order-1`` vanish at both window ends.

    For :class:`ExpPoly` only the finite (right) end is examined; it vanishes
    to order ``j`` by construction, which is what the observer relies on.
    """
    left, right = kernel.boundary_orders()
    return min(left, right) >= order


@dataclass(frozen=True)
class Window:
    T1: float
    T2: float

    def __post_init__(self):
        if not self.T2 > self.T1:
            raise ValueError(f"window needs T2 > T1, got ({self.T1}, {self.T2})")

    @property
    def length(self) -> float:
        return self.T2 - self.T1


def snap_window(x: TimeSeries, w: Window) -> tuple[int, int, Window]:
    """Snap a window inward onto the sample grid of ``x``.

    Returns ``(i0, i1, snapped)`` with inclusive sample indices.
    """
    i0 = int(math.ceil((w.T1 - x.t0) / x.dt - _GRID_EPS))
    i1 = int(math.floor((w.T2 - x.t0) / x.dt + _GRID_EPS))
    lo, hi = x.valid
    if i0 < lo or i1 > hi - 1:
        raise OutOfRangeError(
            f"invalid index: window [{w.T1:.6g}, {w.T2:.6g}] outside valid data "
            f"[{x.valid_span[0]:.6g}, {x.valid_span[1]:.6g}]"
        )
    if i1 - i0 + 1 < MIN_WINDOW_SAMPLES:
        raise OutOfRangeError(f"window [{w.T1:.6g}, {w.T2:.6g}] holds fewer than {MIN_WINDOW_SAMPLES} samples")
    return i0, i1, Window(x.t0 + i0 * x.dt, x.t0 + i1 * x.dt)


def simpson_weights(count: int, dx: float) -> np.ndarray:
    """Composite Simpson weights; an even point count ends with a 3/8 panel."""
    if count < 4:
        raise ValueError("Simpson weights need at least 4 points")
    w = np.zeros(count)
    m = count if count % 2 else count - 3
    w[:m:2] += 2.0
    w[1:m:2] += 4.0
    w[0] -= 1.0
    w[m - 1] -= 1.0
    w[:m] *= dx / 3.0
    if m < count:
        w[m - 1 :] += 3.0 * dx / 8.0 * np.array([1.0, 3.0, 3.0, 1.0])
    return w


@lru_cache(maxsize=512)
def _weights(kernel: ModulatingKernel, order: int, count: int, dt: float) -> np.ndarray:
    # on a snapped window theta_i = i / (count - 1), so the weights only
    # depend on the sample count (and dt for the absolute-time family)
    t = dt * np.arange(count)
    vals = kernel.on_window(order, t, 0.0, dt * (count - 1))
    w = vals * simpson_weights(count, dt)
    w.setflags(write=False)
    return w


def window_integrals(
    x: TimeSeries, terms: list[tuple[ModulatingKernel, int]], w: Window
) -> np.ndarray:
    """Integrals of ``x`` against several (kernel, derivative order) pairs.

    Composite Simpson on the window snapped inward to the sample grid.
    """
    i0, i1, _ = snap_window(x, w)
    seg = x.values[i0 : i1 + 1]
    count = i1 - i0 + 1
    return np.array([_weights(k, order, count, x.dt) @ seg for k, order in terms])


def window_integral(x: TimeSeries, kernel: ModulatingKernel, derivative_order: int, w: Window) -> float:
    return float(window_integrals(x, [(kernel, derivative_order)], w)[0])

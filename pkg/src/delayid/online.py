"""Continuous-time identification with exponential forgetting.

The running integrals ``J_j(t) = int_0^t g_j(t - tau) x(tau) dtau`` with
``g_j(s) = s**j exp(-lam s) / j!`` obey the linear cascade

    J_0' = x - lam J_0,        J_j' = J_{j-1} - lam J_j,

so they are cheap to maintain sample by sample.  Kernels ``g_0..g_{n-1}``
observe the state at the running time; ``g_n..`` vanish there to order
``n`` and yield one regression row each for the unknown coefficients,
which a gradient flow tracks without ever inverting the (possibly
ill-conditioned) regression matrix.  A delay is tracked by shifting the
input by the running estimate ``h`` and letting a first-order Taylor
column absorb the remainder.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import KernelContractError
from .signals import TimeSeries, rescale_time


@dataclass(frozen=True)
class IntegralBank:
    J: np.ndarray
    lam: float

    @classmethod
    def zeros(cls, size: int, lam: float) -> "IntegralBank":
        return cls(np.zeros(size), float(lam))


def _cascade(J: np.ndarray, x: float, lam: float) -> np.ndarray:
    out = -lam * J
    out[0] += x
    out[1:] += J[:-1]
    return out


def step_bank(
    bank: IntegralBank, sample: float, dt: float, next_sample: float | None = None, rate: float = 1.0
) -> IntegralBank:
    """Advance the cascade by one RK4 step.

    The signal is taken linear between ``sample`` and ``next_sample`` (held
    constant if the latter is omitted).  ``rate`` scales time, which is how
    a drifting shift of the input is accounted for.
    """
    x1 = sample if next_sample is None else next_sample
    xm = 0.5 * (sample + x1)
    J, lam = bank.J, bank.lam
    k1 = rate * _cascade(J, sample, lam)
    k2 = rate * _cascade(J + 0.5 * dt * k1, xm, lam)
    k3 = rate * _cascade(J + 0.5 * dt * k2, xm, lam)
    k4 = rate * _cascade(J + dt * k3, x1, lam)
    return IntegralBank(J + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), lam)


def bank_trajectory(x: TimeSeries, size: int, lam: float) -> np.ndarray:
    """All bank states along ``x`` (shape ``len(x) x size``), for offline checks."""
    out = np.zeros((len(x), size))
    bank = IntegralBank.zeros(size, lam)
    v = x.values
    for k in range(len(x) - 1):
        bank = step_bank(bank, v[k], x.dt, v[k + 1])
        out[k + 1] = bank.J
    return out


@dataclass(frozen=True)
class ExpansionMatrices:
    """``I_{x^(i), g_k} = M[i, k] . J + B[i, k] . (x, x', ..., x^(n-1))(t)``.

    ``M`` has shape ``(n+1, size, size)`` and ``B`` ``(n+1, size, n)``.  Rows
    ``k >= n`` of ``B`` are zero: those kernels annihilate the boundary terms.
    """

    n: int
    lam: float
    M: np.ndarray
    B: np.ndarray

    @property
    def size(self) -> int:
        return self.M.shape[1]


def build_expansion_matrices(n: int, lam: float, size: int | None = None) -> ExpansionMatrices:
    """Recurrence from integrating ``x^(i)`` against ``g_k`` by parts.

    With ``d/dtau g_k(t - tau) = lam g_k - g_{k-1}`` one gets
    ``I_{x', g_k} = [k == 0] x(t) - lam I_{x, g_k} + I_{x, g_{k-1}}``
    (the contribution of the start of the record is dropped; it decays like
    ``exp(-lam t)``).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    size = size if size is not None else 2 * n + 2
    M = np.zeros((n + 1, size, size))
    B = np.zeros((n + 1, size, n))
    M[0] = np.eye(size)
    for i in range(1, n + 1):
        M[i] = -lam * M[i - 1]
        M[i, 1:] += M[i - 1, :-1]
        B[i] = -lam * B[i - 1]
        B[i, 1:] += B[i - 1, :-1]
        B[i, 0, i - 1] += 1.0
    return ExpansionMatrices(n, float(lam), M, B)


def row_weights(em: ExpansionMatrices, scaling: str = "raw") -> np.ndarray:
    """Per-row factors: ``k!`` turns kernel ``g_k`` into ``s**k exp(-lam s)``."""
    ks = range(em.n, em.size)
    if scaling == "raw":
        return np.array([float(math.factorial(k)) for k in ks])
    if scaling == "normalized":
        return np.ones(len(ks))
    raise ValueError(f"unknown kernel scaling {scaling!r}")


def assemble_regression(
    bank_y: IntegralBank, bank_u: IntegralBank, em: ExpansionMatrices, delay: bool = True,
    weights: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Rows for kernels ``g_n .. g_{size-1}``; unknowns ``(a_0..a_{n-1}, b0[, b1])``.

    ``b1 = b * (h - h_hat)``; its column is ``-I_{u_hat', g_k}``.  Optional
    ``weights`` scale the rows (see :func:`row_weights`).
    """
    n, lam = em.n, em.lam
    Jy, Ju = bank_y.J, bank_u.J
    ks = np.arange(n, em.size)
    cols = [em.M[i, ks] @ Jy for i in range(n)]
    cols.append(Ju[ks])
    if delay:
        cols.append(lam * Ju[ks] - Ju[ks - 1])
    C = np.column_stack(cols)
    D = em.M[n, ks] @ Jy
    if weights is not None:
        C, D = C * weights[:, None], D * weights
    return C, D


@dataclass(frozen=True)
class OnlineEstimatorState:
    A: np.ndarray
    h: float = 0.0
    gain: float = 1e-3
    lam_h: float = 0.4
    T0: float = math.inf
    t: float = 0.0
    b0_floor: float = 1e-3

    def delay_rate(self, n: int) -> float:
        """``lam_h * b1 / b0`` once past ``T0``; zero while ``b0`` is too small."""
        if self.t <= self.T0 or self.A.size < n + 2:
            return 0.0
        b0, b1 = self.A[n], self.A[n + 1]
        if abs(b0) < self.b0_floor * np.max(np.abs(self.A)):
            return 0.0
        return self.lam_h * b1 / b0


def gradient_step(
    state: OnlineEstimatorState, C: np.ndarray, D: np.ndarray, dt: float, method: str = "exact"
) -> OnlineEstimatorState:
    """Advance ``A' = -gain C^t (C A - D)`` over ``dt`` with ``C, D`` frozen.

    ``euler`` is the single explicit step ``A - dt gain C^t (C A - D)``.
    ``exact`` integrates the frozen linear flow in closed form through the
    eigenvectors of ``C^t C``: directions with eigenvalue ``mu`` relax by
    ``exp(-gain mu dt)``.  It is stable for any step and, like the flow
    itself, leaves null directions of ``C`` untouched.
    """
    grad = C.T @ (C @ state.A - D)
    if method == "euler":
        return replace(state, A=state.A - dt * state.gain * grad)
    if method != "exact":
        raise ValueError(f"unknown gradient step method {method!r}")
    mu, V = np.linalg.eigh(C.T @ C)
    z = dt * state.gain * np.clip(mu, 0.0, None)
    # phi(z) = (1 - exp(-z)) / z, the relaxed fraction of a unit-rate step
    safe = np.where(z > 1e-12, z, 1.0)
    phi = np.where(z > 1e-12, -np.expm1(-z) / safe, 1.0 - 0.5 * z)
    step = V @ (phi * (V.T @ grad))
    return replace(state, A=state.A - dt * state.gain * step)


def track_delay(state: OnlineEstimatorState, dt: float, n: int = 2) -> OnlineEstimatorState:
    h = max(state.h + dt * state.delay_rate(n), 0.0)
    return replace(state, h=h)


def step_shifted_input_integrals(
    bank: IntegralBank, u: TimeSeries, state: OnlineEstimatorState, dt: float,
    n: int = 2, correction: bool = True,
) -> IntegralBank:
    """Advance the bank on ``u(t - h)`` from ``state.t`` to ``state.t + dt``.

    The bank is meant to hold the integrals of ``u`` shifted by the *current*
    ``h``.  When ``h`` drifts at rate ``h'``, that quantity moves at
    ``(1 - h')`` times the plain cascade speed; ``correction`` applies this.
    """
    t = state.t - state.h
    samples = u.at(np.array([t, t + dt]))
    rate = 1.0 - state.delay_rate(n) if correction else 1.0
    return step_bank(bank, samples[0], dt, samples[1], rate=rate)


def observe_state_online(
    bank_y: IntegralBank, bank_u: IntegralBank, em: ExpansionMatrices, A: np.ndarray, u_now: float
) -> np.ndarray:
    """State estimate at the running time from the kernels ``g_0..g_{n-1}``."""
    n, lam = em.n, em.lam
    a = np.append(A[:n], -1.0)
    b0 = A[n]
    b1 = A[n + 1] if A.size > n + 1 else 0.0
    Jy, Ju = bank_y.J, bank_u.J
    lhs = np.einsum("i,ikl->kl", a, em.B[:, :n])
    rhs = np.empty(n)
    for k in range(n):
        delay_col = lam * Ju[k] - (Ju[k - 1] if k else u_now)
        rhs[k] = -(a @ (em.M[:, k] @ Jy) + b0 * Ju[k] + b1 * delay_col)
    try:
        return np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise KernelContractError("observer boundary system is singular") from exc


@dataclass
class OnlineConfig:
    """Knobs of :func:`run_online`.

    ``rows`` is the number of annihilating kernels (regression rows).
    ``scaling="raw"`` weighs kernel rows as ``s**k exp(-lam s)`` (the gain
    values quoted for the examples assume it); ``"normalized"`` keeps the
    ``1/k!`` bank normalisation in the rows as well.
    ``T0 = inf`` disables delay tracking; ``delay=False`` drops the Taylor
    column altogether (delay-free model).  ``time_scale`` relabels time as
    ``time_scale * t`` before estimating and maps the estimates back, for
    delays that are large compared with the dynamics.
    """

    n: int = 2
    rows: int = 5
    lam: float = 1.0
    gain: float = 1e-3
    lam_h: float = 0.4
    T0: float = math.inf
    h0: float = 0.0
    delay: bool = True
    correction: bool = True
    b0_floor: float = 1e-3
    time_scale: float = 1.0
    step: str = "exact"
    scaling: str = "raw"


@dataclass
class OnlineResult:
    t: np.ndarray
    A: np.ndarray
    h: np.ndarray
    x: np.ndarray
    n: int
    delay: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        names = ["t"] + [f"a{i}_hat" for i in range(self.n)] + ["b0_hat"]
        if self.delay:
            names.append("b1_hat")
        names.append("h_hat")
        names += ["x_hat", "xdot_hat"][: self.n] + [f"x{k}_hat" for k in range(2, self.n)]
        return names

    def table(self) -> np.ndarray:
        return np.column_stack([self.t, self.A, self.h, self.x])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.table():
                writer.writerow([f"{v:.10g}" for v in row])

    def at(self, t: float) -> dict[str, float]:
        i = int(np.searchsorted(self.t, t - 1e-9))
        i = min(i, self.t.size - 1)
        return dict(zip(self.columns, self.table()[i]))


def run_online(y: TimeSeries, u: TimeSeries, config: OnlineConfig | None = None) -> OnlineResult:
    """Run banks, gradient flow, delay tracker and observer over a record."""
    config = config or OnlineConfig()
    c = config.time_scale
    if c != 1.0:
        y, u = rescale_time(y, c), rescale_time(u, c)
    n, dt = config.n, y.dt
    em = build_expansion_matrices(n, config.lam, n + config.rows)
    weights = row_weights(em, config.scaling)
    p = n + 2 if config.delay else n + 1
    state = OnlineEstimatorState(
        A=np.zeros(p), h=config.h0 * c, gain=config.gain, lam_h=config.lam_h,
        T0=config.T0 * c, t=y.t0, b0_floor=config.b0_floor,
    )
    bank_y = IntegralBank.zeros(em.size, config.lam)
    bank_u = IntegralBank.zeros(em.size, config.lam)
    N = len(y)
    A_log, h_log, x_log = np.zeros((N, p)), np.zeros(N), np.zeros((N, n))
    h_log[0] = state.h
    yv = y.values
    for k in range(N - 1):
        bank_y = step_bank(bank_y, yv[k], dt, yv[k + 1])
        bank_u = step_shifted_input_integrals(bank_u, u, state, dt, n, config.correction)
        C, D = assemble_regression(bank_y, bank_u, em, config.delay, weights)
        state = gradient_step(state, C, D, dt, config.step)
        if config.delay:
            state = track_delay(state, dt, n)
        state = replace(state, t=state.t + dt)
        u_now = float(u.at(state.t - state.h))
        x_log[k + 1] = observe_state_online(bank_y, bank_u, em, state.A, u_now)
        A_log[k + 1] = state.A
        h_log[k + 1] = state.h
    t = y.times
    if c != 1.0:
        # x^(n) = sum a_i x^(i) + b u(t - h) in rescaled time -> original time
        A_log[:, :n] *= c ** (n - np.arange(n))
        A_log[:, n:] *= c**n
        if config.delay:
            A_log[:, n + 1] /= c
        h_log, t = h_log / c, t / c
        x_log *= c ** np.arange(n)
    return OnlineResult(t, A_log, h_log, x_log, n, config.delay)

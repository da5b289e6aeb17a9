import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from delayid.errors import CoverageError, DivergenceError, NonInvertibleError, OutOfRangeError, SamplingError
from delayid.modfun import Window, window_integral, SinPow
from delayid.signals import (
    EXAMPLE1_INPUT,
    EXAMPLE3_OUTPUT,
    Constant,
    NoiseSpec,
    Profile,
    Sinusoids,
    SystemSpec,
    TimeSeries,
    add_noise,
    invert_for_input,
    sample_expression,
    shift,
    simulate,
)


# -- TimeSeries ---------------------------------------------------------------

def test_timeseries_rejects_bad_input():
    with pytest.raises(ValueError):
        TimeSeries(0.0, 0.0, [1.0, 2.0])
    with pytest.raises(SamplingError, match="t=0.2"):
        TimeSeries(0.0, 0.1, [1.0, 2.0, np.nan])


def test_timeseries_grid_and_readonly():
    ts = TimeSeries(-1.0, 0.5, np.arange(5.0))
    np.testing.assert_allclose(ts.times, [-1.0, -0.5, 0.0, 0.5, 1.0])
    assert ts.t_end == 1.0
    with pytest.raises(ValueError):
        ts.values[0] = 3.0


def test_require_reports_invalid_index():
    ts = TimeSeries(0.0, 0.1, np.zeros(11))
    ts.require(0.0, 1.0)
    with pytest.raises(OutOfRangeError, match="invalid index"):
        ts.require(-0.5, 0.5)


def test_csv_round_trip(tmp_path):
    ts = sample_expression(EXAMPLE1_INPUT, -10.0, 0.01, 500)
    ts.to_csv(tmp_path / "u.csv")
    assert (tmp_path / "u.csv").read_text().splitlines()[0] == "time,value"
    back = TimeSeries.from_csv(tmp_path / "u.csv")
    assert back.t0 == pytest.approx(ts.t0, abs=1e-12)
    assert back.dt == pytest.approx(ts.dt, rel=1e-12)
    np.testing.assert_allclose(back.values, ts.values, rtol=1e-13, atol=1e-12)


# -- sample_expression ---------------------------------------------------------

def test_sample_zero():
    assert not np.any(sample_expression(lambda t: 0.0 * t, 3.0, 0.1, 7).values)


def test_sample_example_signals():
    ts = sample_expression(EXAMPLE1_INPUT, 0.0, 0.01, 1001)
    t = ts.times
    np.testing.assert_allclose(ts.values, 60 * np.cos(1.23 * t + 1.3 * np.sin(t) - 0.7 * np.cos(0.5 * t)))
    ts = sample_expression(EXAMPLE3_OUTPUT, 0.0, 0.002, 5001)
    t = ts.times
    np.testing.assert_allclose(ts.values, 3 * np.sin(t / 2) + 2 * np.cos(t / 3), atol=1e-13)


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_sample_non_finite_names_time():
    with pytest.raises(SamplingError, match="t=0.5"):
        sample_expression(lambda t: 1.0 / (t - 0.5), 0.0, 0.25, 4)


def test_sinusoid_derivative_closed_form():
    d2 = EXAMPLE3_OUTPUT.derivative(2)
    t = np.linspace(0, 10, 7)
    np.testing.assert_allclose(d2(t), -0.75 * np.sin(t / 2) - 2 / 9 * np.cos(t / 3), atol=1e-13)


# -- noise --------------------------------------------------------------------

def test_noise_zero_sigma_is_identity():
    ts = sample_expression(np.sin, 0.0, 0.01, 100)
    assert add_noise(ts, NoiseSpec(0.0, 3)) is ts


def test_noise_mean_within_lln_bound():
    ts = TimeSeries(0.0, 0.01, np.zeros(10_000))
    w = add_noise(ts, NoiseSpec(5.0, 11)).values
    assert abs(w.mean()) < 4 * 5.0 / math.sqrt(10_000)
    assert w.std() == pytest.approx(5.0, rel=0.05)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_noise_is_reproducible(seed, sigma):
    ts = TimeSeries(0.0, 0.1, np.arange(50.0))
    a = add_noise(ts, NoiseSpec(sigma, seed)).values
    b = add_noise(ts, NoiseSpec(sigma, seed)).values
    assert np.array_equal(a, b)


def test_noise_rejects_negative_sigma():
    with pytest.raises(ValueError):
        NoiseSpec(-1.0)


# -- shift --------------------------------------------------------------------

def test_shift_zero_is_identity():
    ts = sample_expression(np.sin, 0.0, 0.01, 100)
    out = shift(ts, 0.0)
    assert np.array_equal(out.values, ts.values) and out.valid == ts.valid


def test_shift_on_grid_is_index_shift():
    ts = TimeSeries(0.0, 0.5, np.arange(10.0))
    out = shift(ts, 1.5)
    assert out.valid == (3, 10)
    np.testing.assert_array_equal(out.values[3:], np.arange(7.0))


def test_shift_sinusoid_cubic_accuracy():
    ts = sample_expression(lambda t: np.sin(1.23 * t), 0.0, 0.002, 10_001)
    delta = 0.3217
    out = shift(ts, delta)
    lo, hi = out.valid
    t = out.times[lo:hi]
    assert np.max(np.abs(out.values[lo:hi] - np.sin(1.23 * (t - delta)))) < 1e-6


def test_shifted_prehistory_is_unavailable_to_windows():
    ts = sample_expression(np.sin, 0.0, 0.01, 1001)
    out = shift(ts, 2.0)
    window_integral(out, SinPow(2), 0, Window(2.0, 5.0))
    with pytest.raises(OutOfRangeError, match="invalid index"):
        window_integral(out, SinPow(2), 0, Window(1.0, 5.0))


@given(st.floats(-3.0, 3.0))
def test_shift_round_trip(delta):
    ts = sample_expression(lambda t: np.sin(1.23 * t) + 0.5 * np.cos(0.4 * t), 0.0, 0.002, 5001)
    back = shift(shift(ts, delta), -delta)
    lo, hi = back.valid
    lo, hi = lo + 2, hi - 2  # stencils next to the valid edge are one-sided
    assert hi > lo
    assert np.max(np.abs(back.values[lo:hi] - ts.values[lo:hi])) < 1e-6


# -- simulate -----------------------------------------------------------------

def test_simulate_zero_gain_is_zero():
    spec = SystemSpec((-1.0, -0.5), 0.0)
    x = simulate(spec, EXAMPLE1_INPUT, 10.0, 0.01)
    assert not np.any(x[0].values) and not np.any(x[1].values)


def test_simulate_harmonic_oscillator():
    spec = SystemSpec((-1.0, 0.0), 0.0, init=(1.0, 0.0))
    x, xd = simulate(spec, Constant(0.0), 50.0, 1e-3)
    assert np.max(np.abs(x.values - np.cos(x.times))) < 1e-6
    assert np.max(np.abs(xd.values + np.sin(x.times))) < 1e-6


def test_simulate_is_fourth_order():
    spec = SystemSpec((-1.0, -0.2), 0.0, init=(1.0, 0.0))
    w = math.sqrt(1 - 0.01)

    def err(dt):
        x = simulate(spec, Constant(0.0), 20.0, dt)[0]
        t = x.times
        exact = np.exp(-0.1 * t) * (np.cos(w * t) + 0.1 / w * np.sin(w * t))
        return np.max(np.abs(x.values - exact))

    assert err(0.1) / err(0.05) >= 8.0


def test_simulate_delay_matches_method_of_steps():
    # x' = -x + u(t - 1), u = 1 for t >= 0 and 0 before, x(0) = 0
    spec = SystemSpec((-1.0,), 1.0, input_delay=1.0)
    u = TimeSeries(-2.0, 0.001, (np.arange(5001) >= 2000).astype(float))
    x = simulate(spec, u, 3.0)[0]
    t = x.times
    exact = np.where(t > 1, 1 - np.exp(-(t - 1)), 0.0)
    mask = np.abs(t - 1) > 0.01  # the step is not smooth
    assert np.max(np.abs(x.values - exact)[mask]) < 1e-3


def test_simulate_example1_is_bounded(ex1_500hz):
    _, (x, xd) = ex1_500hz
    assert np.max(np.abs(x.values)) < 500 and np.max(np.abs(xd.values)) < 500


def test_simulate_short_input_is_coverage_error():
    spec = SystemSpec((-0.35, -1.2), 2.0, input_delay=4.0)
    u = sample_expression(EXAMPLE1_INPUT, 0.0, 0.01, 1001)
    with pytest.raises(CoverageError):
        simulate(spec, u, 10.0)


def test_simulate_blow_up_is_divergence():
    spec = SystemSpec((5.0, 1.0), 0.0, init=(1.0, 0.0))
    with pytest.raises(DivergenceError):
        simulate(spec, Constant(0.0), 100.0, 0.01, guard=1e6)


def test_ramp_profile():
    p = Profile.ramp(-1.2, 30.0, -0.02)
    np.testing.assert_allclose(p(np.array([0.0, 30.0, 60.0])), [-1.2, -1.2, -1.8])
    assert Profile.constant(2.0).is_constant and not p.is_constant


# -- invert_for_input ---------------------------------------------------------

def test_invert_pure_double_integrator():
    spec = SystemSpec((0.0, 0.0), 2.0)
    u = invert_for_input(spec, EXAMPLE3_OUTPUT, 0.0, 0.01, 500)
    np.testing.assert_allclose(u.values, EXAMPLE3_OUTPUT.derivative(2)(u.times) / 2.0, atol=1e-14)


def test_invert_constant_trajectory():
    spec = SystemSpec((-2.7, 0.0), 1.5, input_delay=4.0, state_delay=2.0)
    u = invert_for_input(spec, Constant(3.0), 0.0, 0.01, 100)
    np.testing.assert_allclose(u.values, 2.7 * 3.0 / 1.5)


def test_invert_zero_gain_fails():
    with pytest.raises(NonInvertibleError):
        invert_for_input(SystemSpec((0.0, 0.0), 0.0), EXAMPLE3_OUTPUT, 0.0, 0.01, 10)


def test_invert_then_simulate_round_trip():
    X = EXAMPLE3_OUTPUT
    spec = SystemSpec((-2.7, 0.0), 1.5, input_delay=4.0, state_delay=2.0,
                      init=(float(X(0.0)), float(X.derivative(1)(0.0))), history=X)
    u = invert_for_input(spec, X, -10.0, 0.002, int(40 / 0.002) + 1)
    x = simulate(spec, u, 30.0)[0]
    # the plant is open-loop unstable, so the horizon is kept moderate
    assert np.max(np.abs(x.values - X(x.times))) < 1e-4


def test_invert_sampled_trajectory():
    spec = SystemSpec((-0.35, -1.2), 2.0)
    X = Sinusoids(((1.0, 0.7, 0.2),))
    x = sample_expression(X, 0.0, 0.001, 20001)
    u = invert_for_input(spec, x, 1.0, 0.01, 1000)
    exact = invert_for_input(spec, X, 1.0, 0.01, 1000)
    assert np.max(np.abs(u.values - exact.values)) < 1e-4

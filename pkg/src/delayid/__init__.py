"""Identification of linear systems with input delay by modulating functions."""
from .batch import (
    BatchConfig,
    EstimateReport,
    RefineConfig,
    TwoDelayConfig,
    estimate_delay_iterative,
    estimate_two_delay,
    observe_state,
    refine_nonlinear,
)
from .errors import *  # noqa: F401,F403
from .modfun import ExpPoly, ObserverKernel, OneMinusCos, PolyPow, SinPow, Window, window_integral
from .online import OnlineConfig, run_online
from .scenarios import PRESETS, load_scenario
from .signals import NoiseSpec, Profile, SystemSpec, TimeSeries, add_noise, sample_expression, shift, simulate

__version__ = "0.1.0"

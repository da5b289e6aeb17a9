"""Exception types raised across the package."""


class DelayIdError(Exception):
    """Base class for every error raised by delayid."""


class SamplingError(DelayIdError, ValueError):
    pass


class OutOfRangeError(DelayIdError, IndexError):
    """A window or lookup asked for samples outside a series' valid range."""


class CoverageError(DelayIdError, ValueError):
    """An input signal does not cover the span a simulation needs."""


class DivergenceError(DelayIdError, ArithmeticError):
    pass


class NonInvertibleError(DelayIdError, ValueError):
    pass


class CapabilityError(DelayIdError, ValueError):
    """A kernel was asked for a derivative order it does not provide."""


class KernelContractError(DelayIdError, ValueError):
    """A kernel lacks the boundary annihilation a construction relies on."""


class UnobservableDelayError(DelayIdError, ArithmeticError):
    pass


class IllConditionedDelayError(DelayIdError, ArithmeticError):
    pass


class ScenarioError(DelayIdError, ValueError):
    pass


NUMERICAL_ERRORS = (
    OutOfRangeError,
    DivergenceError,
    UnobservableDelayError,
    IllConditionedDelayError,
    NonInvertibleError,
)

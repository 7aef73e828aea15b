"""Exception hierarchy shared by every module of the package."""


class HourglassError(Exception):
    """Base class for all package errors."""


class DimensionError(HourglassError, ValueError):
    """Array shapes are inconsistent with what an operation expects."""


class DegenerateInputError(HourglassError, ValueError):
    """Input is well-formed but the quantity requested is undefined for it."""


class ConfigurationError(HourglassError, ValueError):
    pass


class FormatError(HourglassError, ValueError):
    """A file on disk does not follow the expected layout."""


class EvaluationError(HourglassError, ArithmeticError):
    """A function under evaluation produced a non-finite value."""


class StateError(HourglassError, RuntimeError):
    """A cache or stateful object does not match the call it is used with."""


class DivergenceError(HourglassError, ArithmeticError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.value = value

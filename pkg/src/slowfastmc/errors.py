"""Exception hierarchy and warning categories shared by all modules."""


class SlowFastError(Exception):
    """Base class for all toolkit errors."""


class ColumnNormViolation(SlowFastError):
    """A correlation column has squared norm above 1."""


class OrthogonalityViolation(SlowFastError):
    """Two correlation columns are not orthogonal."""


class InsufficientSamples(SlowFastError):
    """Fewer samples than a statistic requires."""


class NonFiniteSample(SlowFastError):
    """A sample array contains NaN or infinity."""


class StepTooCoarse(SlowFastError):
    """Requested substepping cannot resolve the fast drift."""


class NumericalBlowup(SlowFastError):
    """A simulated state exceeded the overflow guard."""

    def __init__(self, message: str, path_index: int | None = None):
        super().__init__(message)
        self.path_index = path_index


class DegenerateEpsilon(SlowFastError):
    """Timescale ratio outside (0, 1)."""


class DissipativityViolated(SlowFastError):
    """A sampled point violates the one-sided contraction condition."""

    def __init__(self, message: str, witness=None):
        super().__init__(message)
        self.witness = witness


class NotSymmetric(SlowFastError):
    """Matrix asymmetry exceeds tolerance."""


class NotPSD(SlowFastError):
    """Matrix has an eigenvalue below the negative tolerance."""


class DegenerateVolatility(SlowFastError):
    """Local volatility fell below its declared lower bound."""


class UnboundedPayoff(SlowFastError):
    """Option payoff has no declared cap."""


class ConfigError(SlowFastError):
    """One or more configuration fields are invalid.

    ``errors`` collects every violated field so a config file can be fixed
    in a single pass.
    """

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


class NonStationaryWarning(UserWarning):
    """First and second half of an ergodic trajectory disagree."""


class ExtrapolationWarning(UserWarning):
    """An averaged model was queried outside its tabulated hull."""

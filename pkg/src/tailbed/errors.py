"""Exception types shared across the package."""


class NumericalFailure(RuntimeError):
    """A numerical routine left its domain of validity (non-PD kernel, NaN state, ...)."""


class TrainingFailure(RuntimeError):
    """Surrogate training could not produce a usable model."""


class NotInPoolError(LookupError):
    """A query point is not within matching tolerance of any stored pool member."""

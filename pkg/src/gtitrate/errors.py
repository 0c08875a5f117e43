"""Estimation failure types shared across the estimator modules."""


class EstimationError(RuntimeError):
    """An estimator could not produce a usable result."""


class PositivityError(EstimationError):
    """A target regime falls in a stratum unsupported by the observed data."""

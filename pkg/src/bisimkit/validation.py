"""Input validation helpers shared by the estimators and solvers."""

import numpy as np

ROW_SUM_ATOL = 1e-9


class ConvergenceError(RuntimeError):
    """Raised when a fixed-point solver exceeds its iteration budget."""


class NumericalError(RuntimeError):
    """Raised when a loss or network output becomes non-finite."""


def check_probability_rows(probs, name="probs", atol=ROW_SUM_ATOL):
    """Check that the last axis of ``probs`` holds probability vectors.

    Raises ``ValueError`` naming the first offending index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(probs)):
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(probs))[0])
        raise ValueError(f"{name}{list(idx)} is not finite")
    if np.any(probs < 0):
        idx = tuple(int(i) for i in np.argwhere(probs < 0)[0])
        raise ValueError(f"{name}{list(idx)} = {probs[idx]!r} is negative")
    sums = probs.sum(axis=-1)
    bad = np.abs(sums - 1.0) > atol
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"{name}{list(idx)} sums to {sums[idx]!r}, expected 1")
    return probs


def check_distribution(p, name="p", atol=ROW_SUM_ATOL):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {p.shape}")
    return check_probability_rows(p, name, atol)


def check_finite(x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_square_metric(dist, n=None, name="metric"):
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {dist.shape}")
    if n is not None and dist.shape[0] != n:
        raise ValueError(f"{name} covers {dist.shape[0]} states, expected {n}")
    check_finite(dist, name)
    return dist


def check_unit_interval(value, name, *, upper_open=True):
    value = float(value)
    if not (0.0 <= value < 1.0 if upper_open else 0.0 <= value <= 1.0):
        bound = "[0, 1)" if upper_open else "[0, 1]"
        raise ValueError(f"{name} must lie in {bound}, got {value}")
    return value


def check_positive(value, name):
    value = float(value)
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value

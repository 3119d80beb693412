"""Input validation helpers shared by operators, estimators and metrics."""

import numbers

import numpy as np

from .exceptions import DimensionError


def check_shape(arr, expected, name="array"):
    """Return ``arr`` as an ndarray, raising DimensionError on shape mismatch."""
    arr = np.asarray(arr)
    if arr.shape != tuple(expected):
        raise DimensionError(
            f"{name} has shape {arr.shape}, expected {tuple(expected)}")
    return arr


def check_batch(arr, sample_shape, name="array"):
    """Validate a stack of samples; a single sample is promoted to a batch of one.

    Returns ``(batch, was_single)``.
    """
    arr = np.asarray(arr)
    sample_shape = tuple(sample_shape)
    if arr.shape == sample_shape:
        return arr[None], True
    if arr.shape[1:] != sample_shape:
        raise DimensionError(
            f"{name} has shape {arr.shape}, expected (n_samples, *{sample_shape})")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return arr, False


def check_finite(arr, name="array"):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(
            f"{names[0]} shape {a.shape} does not match {names[1]} shape {b.shape}")
    return a, b


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if value < 0 or (strict and value == 0):
        raise ValueError(f"{name} must be {'positive' if strict else 'non-negative'}, got {value}")
    return value


def check_random_state(seed):
    """Turn ``None``/int/Generator into a numpy Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def real_inner(a, b):
    """Real inner product Re<a, b>, valid for real and complex arrays."""
    return float(np.real(np.vdot(np.ravel(a), np.ravel(b))))

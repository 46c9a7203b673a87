"""Activation functions with derivatives, deterministic reductions and the
central finite-difference oracle used to verify every analytic gradient in
the package.

All checks run in float64 regardless of what precision a model stores its
parameters in.
"""

import numpy as np
from scipy.special import erf

from .errors import ShapeError

RELU = "relu"
GELU = "gelu"
SIN = "sin"

ACTIVATION_KINDS = (RELU, GELU, SIN)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def normal_cdf(x):
    """Standard normal CDF via the error function (no tanh approximation)."""
    return 0.5 * (1.0 + erf(np.asarray(x, dtype=np.float64) * _INV_SQRT2))


def normal_pdf(x):
    return _INV_SQRT2PI * np.exp(-0.5 * np.square(np.asarray(x, dtype=np.float64)))


def _check_finite(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("activation input must be finite")
    return x


def activation_forward(kind, x):
    """Evaluate an activation elementwise. `x` may be a scalar or array."""
    x = _check_finite(x)
    if kind == RELU:
        return np.maximum(x, 0.0)
    if kind == GELU:
        return x * normal_cdf(x)
    if kind == SIN:
        return np.sin(x)
    raise ValueError(f"unknown activation kind: {kind!r}")


def activation_derivative(kind, x):
    """Elementwise derivative. ReLU at exactly 0 is defined as 0."""
    x = _check_finite(x)
    if kind == RELU:
        return (x > 0.0).astype(np.float64)
    if kind == GELU:
        return normal_cdf(x) + x * normal_pdf(x)
    if kind == SIN:
        return np.cos(x)
    raise ValueError(f"unknown activation kind: {kind!r}")


def finite_diff_jacobian(f, x, h=1e-5):
    """Central-difference Jacobian of a vector->vector callable.

    Returns an array of shape (len(f(x)), len(x)). Raises if `f` produces
    non-finite values at any probe point.
    """
    if h <= 0.0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=np.float64).ravel()
    cols = []
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = np.asarray(f(xp), dtype=np.float64).ravel()
        fm = np.asarray(f(xm), dtype=np.float64).ravel()
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError("function returned non-finite values during finite differencing")
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)


def matmul(a, b):
    """Matrix product with an explicit inner-dimension check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-d arrays")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def deterministic_sum(values):
    """Sum with a fixed left-to-right pairwise-tree order.

    The accumulation order depends only on the input length, so repeated
    runs over the same sequence are bit-identical.
    """
    vals = [float(v) for v in values]
    if not vals:
        return 0.0
    while len(vals) > 1:
        nxt = []
        for i in range(0, len(vals) - 1, 2):
            nxt.append(vals[i] + vals[i + 1])
        if len(vals) % 2 == 1:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]

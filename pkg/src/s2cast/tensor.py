"""Dense float64 kernels used by the layers.

Values are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
Every kernel checks its operand shapes explicitly; broadcasting is limited
to multiplying by a Python scalar (``scale``).
"""

import numpy as np

from .errors import NumericalError, ShapeError

DTYPE = np.float64


def as_tensor(x):
    """Return ``x`` as a C-contiguous float64 array (copying only if needed)."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def zeros(*shape):
    return np.zeros(shape, dtype=DTYPE)


def check_finite(x, what="tensor"):
    if not np.isfinite(x).all():
        raise NumericalError(f"{what} contains non-finite values")
    return x


def matmul(a, b):
    """Matrix product of a (m, k) and a (k, n) array."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    with np.errstate(over="raise", invalid="raise"):
        try:
            out = a @ b
        except FloatingPointError as exc:
            raise NumericalError(f"matmul overflow: {exc}") from None
    return check_finite(out, "matmul result")


def sigmoid(x):
    # exp only ever sees non-positive arguments, so it cannot overflow.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh(x):
    return np.tanh(x)


def relu(x):
    return np.maximum(x, 0.0)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op, *args):
    """Apply a pointwise op.

    ``op`` is one of add, sub, mul (two arrays of equal shape), sigmoid,
    tanh, relu (one array) or scale (array, scalar).
    """
    if op in _UNARY:
        if len(args) != 1:
            raise ShapeError(f"{op} takes one operand")
        return _UNARY[op](args[0])
    if op in _BINARY:
        a, b = args
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        with np.errstate(over="raise", invalid="raise"):
            try:
                return _BINARY[op](a, b)
            except FloatingPointError as exc:
                raise NumericalError(f"{op} overflow: {exc}") from None
    if op == "scale":
        a, s = args
        if np.ndim(s) != 0:
            raise ShapeError("scale expects a scalar factor")
        return check_finite(a * float(s), "scale result")
    raise ValueError(f"unknown elementwise op {op!r}")


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def reduce(op, x, axis=0):
    """Sum or mean along one axis; the axis is dropped from the shape."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    if op == "sum":
        return x.sum(axis=axis)
    if op == "mean":
        return x.mean(axis=axis)
    raise ValueError(f"unknown reduction {op!r}")

"""Dense float64 arithmetic and the nonlinearities every layer uses.

Tensors are plain :class:`numpy.ndarray` objects of dtype ``float64``.
Shapes are always explicit: functions in this module and in
:mod:`casrnn.nn` raise :class:`ShapeError` rather than broadcast.
"""

import numpy
from scipy import special


__all__ = ["ShapeError", "as_tensor", "check_shape", "matvec",
           "sigmoid", "tanh", "softmax", "log_softmax", "ACTIVATIONS",
           "activation_derivative", "glorot_uniform"]


class ShapeError(ValueError):
    """Raised when the dimensions of operands do not agree."""
    pass


def as_tensor(x, shape=None):
    """Converts ``x`` to a C-contiguous float64 array.

    Raises :class:`ShapeError` if ``shape`` is given and does not match,
    and ``ValueError`` if any element is not finite.
    """
    a = numpy.asarray(x, dtype=numpy.float64, order="C")
    if shape is not None and a.shape != tuple(shape):
        raise ShapeError("expected shape {}, got {}"
                         .format(tuple(shape), a.shape))
    if not numpy.all(numpy.isfinite(a)):
        raise ValueError("tensor contains non-finite values")
    return a


def check_shape(name, a, shape):
    """Checks ``a.shape`` against ``shape``; ``None`` entries match any size."""
    if a.ndim != len(shape) or any(
            s is not None and s != d for s, d in zip(shape, a.shape)):
        raise ShapeError("{}: expected shape {}, got {}".format(
            name, tuple("*" if s is None else s for s in shape), a.shape))


def matvec(a, x):
    """Matrix-vector product ``y[i] = sum_j a[i, j] * x[j]``."""
    a = numpy.asarray(a, dtype=numpy.float64)
    x = numpy.asarray(x, dtype=numpy.float64)
    if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ShapeError("cannot multiply {} by {}".format(a.shape, x.shape))
    return a @ x


def sigmoid(x):
    # expit saturates to exactly 0 or 1 instead of overflowing
    return special.expit(numpy.asarray(x, dtype=numpy.float64))


def tanh(x):
    return numpy.tanh(numpy.asarray(x, dtype=numpy.float64))


def softmax(v):
    """Softmax over the last axis, computed with max-subtraction."""
    v = numpy.asarray(v, dtype=numpy.float64)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise ShapeError("softmax of empty vector (shape {})".format(v.shape))
    e = numpy.exp(v - numpy.max(v, axis=-1, keepdims=True))
    return e/numpy.sum(e, axis=-1, keepdims=True)


def log_softmax(v):
    v = numpy.asarray(v, dtype=numpy.float64)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise ShapeError("softmax of empty vector (shape {})".format(v.shape))
    return v - special.logsumexp(v, axis=-1, keepdims=True)


# The only pointwise nonlinearities a network may use. Softmax and max
# pooling complete the set.
ACTIVATIONS = {
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def activation_derivative(name, y):
    """Derivative of activation ``name`` expressed through its output ``y``."""
    if name == "sigmoid":
        return y*(1.0 - y)
    elif name == "tanh":
        return 1.0 - y*y
    else:
        raise ValueError("unknown activation {!r}".format(name))


def glorot_uniform(rng, shape, fan_in=None, fan_out=None):
    """Glorot-uniform draw; fans default to the last two dimensions.

    For convolution kernels ``(out, in, kh, kw)`` pass the fans explicitly.
    """
    if fan_in is None:
        fan_in = shape[-1]
    if fan_out is None:
        fan_out = shape[0]
    limit = numpy.sqrt(6.0/(fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)

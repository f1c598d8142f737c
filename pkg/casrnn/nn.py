"""Layers with explicit forward and backward passes.

This is the only module that computes gradients. Every trainable array is
a :class:`Param`; backward functions *add* into ``Param.grad`` and the
trainer owns the zero / accumulate / step cycle.

All layer functions accept the single-sample shapes (vectors, ``C×S×S``
images) as well as the same shapes with a leading batch axis.
"""

from collections import namedtuple
import logging

import numpy
from numpy.lib.stride_tricks import sliding_window_view

from casrnn.numerics import (ShapeError, ACTIVATIONS, as_tensor,
                             sigmoid, tanh, softmax, log_softmax,
                             glorot_uniform)


logger = logging.getLogger(__name__)


class StateError(RuntimeError):
    """Raised when cached or staged state does not match the request."""
    pass


class Param:
    """A trainable array and its gradient accumulator."""
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = as_tensor(value)
        self.grad = numpy.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return "<Param shape={}>".format(self.value.shape)


def zero_grads(params):
    for p in params:
        p.zero_grad()


def _outer(d, x):
    # sums the per-sample outer products when a batch axis is present
    if d.ndim == 1:
        return numpy.outer(d, x)
    return d.T @ x


def _check_batch(name, a, batch):
    lead = a.shape[:-1]
    if lead != batch:
        raise ShapeError("{}: batch dimensions {} do not match {}"
                         .format(name, lead, batch))


class GruParams:
    """Gate matrices of a bias-free GRU.

    ``W_*`` map the ``input_dim`` input, ``V_*`` the ``hidden_dim`` state:
    update gate (``W_u``, ``V_u``), candidate (``W``, ``V``) and reset gate
    (``W_r``, ``V_r``). With ``rng=None`` every matrix starts at zero.
    """
    names = ("W_u", "V_u", "W", "V", "W_r", "V_r")

    def __init__(self, input_dim, hidden_dim, rng=None):
        if input_dim < 1 or hidden_dim < 1:
            raise ValueError("GRU dimensions must be positive, got "
                             "input_dim={}, hidden_dim={}"
                             .format(input_dim, hidden_dim))
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        for name in self.names:
            cols = input_dim if name.startswith("W") else hidden_dim
            shape = (hidden_dim, cols)
            if rng is None:
                value = numpy.zeros(shape)
            else:
                value = glorot_uniform(rng, shape)
            setattr(self, name, Param(value))

    def named_params(self, prefix=""):
        return [(prefix + name, getattr(self, name)) for name in self.names]

    def params(self):
        return [p for _, p in self.named_params()]


GruStepCache = namedtuple("GruStepCache",
                          "x h_prev u r rh h_tilde")


class GruTrace:
    """Per-step caches of one :func:`gru_forward` call."""
    def __init__(self, params, steps):
        self.params = params
        self.steps = steps

    def __len__(self):
        return len(self.steps)


def gru_step(p, x_t, h_prev):
    """One GRU step; returns ``(h_t, cache)``.

    ``u = σ(W_u x + V_u h)``, ``r = σ(W_r x + V_r h)``,
    ``h̃ = tanh(W x + V (r ⊙ h))``, ``h_t = (1 − u) ⊙ h + u ⊙ h̃``.
    """
    x_t = numpy.asarray(x_t, dtype=numpy.float64)
    h_prev = numpy.asarray(h_prev, dtype=numpy.float64)
    if x_t.ndim not in (1, 2) or x_t.shape[-1] != p.input_dim:
        raise ShapeError("GRU input: expected (*, {}), got {}"
                         .format(p.input_dim, x_t.shape))
    if h_prev.shape[-1:] != (p.hidden_dim, ):
        raise ShapeError("GRU state: expected (*, {}), got {}"
                         .format(p.hidden_dim, h_prev.shape))
    _check_batch("GRU state", h_prev, x_t.shape[:-1])

    u = sigmoid(x_t @ p.W_u.value.T + h_prev @ p.V_u.value.T)
    r = sigmoid(x_t @ p.W_r.value.T + h_prev @ p.V_r.value.T)
    rh = r*h_prev
    h_tilde = tanh(x_t @ p.W.value.T + rh @ p.V.value.T)
    h_t = (1.0 - u)*h_prev + u*h_tilde
    return h_t, GruStepCache(x_t, h_prev, u, r, rh, h_tilde)


def gru_step_backward(p, cache, d_h):
    """Accumulates the step's parameter gradients.

    Returns ``(d_x, d_h_prev)``.
    """
    x, h_prev, u, r, rh, h_tilde = cache
    d_h_tilde = d_h*u
    d_u = d_h*(h_tilde - h_prev)
    d_h_prev = d_h*(1.0 - u)

    d_a = d_h_tilde*(1.0 - h_tilde*h_tilde)
    p.W.grad += _outer(d_a, x)
    p.V.grad += _outer(d_a, rh)
    d_rh = d_a @ p.V.value
    d_h_prev += d_rh*r
    d_x = d_a @ p.W.value

    d_a_r = d_rh*h_prev*r*(1.0 - r)
    p.W_r.grad += _outer(d_a_r, x)
    p.V_r.grad += _outer(d_a_r, h_prev)
    d_h_prev += d_a_r @ p.V_r.value
    d_x += d_a_r @ p.W_r.value

    d_a_u = d_u*u*(1.0 - u)
    p.W_u.grad += _outer(d_a_u, x)
    p.V_u.grad += _outer(d_a_u, h_prev)
    d_h_prev += d_a_u @ p.V_u.value
    d_x += d_a_u @ p.W_u.value
    return d_x, d_h_prev


def gru_forward(p, seq, h_0=None):
    """Folds :func:`gru_step` over ``seq`` from ``h_0`` (zeros by default).

    ``seq`` is a sequence of ``(D,)`` or ``(B, D)`` arrays, or one array
    with time as the first axis. Returns ``(h_last, trace)``.
    """
    if len(seq) == 0:
        raise ValueError("GRU input sequence is empty")
    if h_0 is None:
        first = numpy.asarray(seq[0])
        h_0 = numpy.zeros(first.shape[:-1] + (p.hidden_dim, ))
    h = h_0
    steps = []
    for x_t in seq:
        h, cache = gru_step(p, x_t, h)
        steps.append(cache)
    return h, GruTrace(p, steps)


def gru_backward(p, trace, d_h_last):
    """Backpropagation through time over a :func:`gru_forward` trace.

    Accumulates into the gradients of ``p`` and returns the list of
    gradients with respect to each input vector, in sequence order.
    """
    if trace.params is not p:
        raise StateError("GRU trace was recorded with a different "
                         "parameter set")
    d_h = numpy.asarray(d_h_last, dtype=numpy.float64)
    if d_h.shape != trace.steps[-1].h_prev.shape:
        raise ShapeError("GRU output gradient: expected {}, got {}"
                         .format(trace.steps[-1].h_prev.shape, d_h.shape))
    d_inputs = [None]*len(trace.steps)
    for t in reversed(range(len(trace.steps))):
        d_inputs[t], d_h = gru_step_backward(p, trace.steps[t], d_h)
    return d_inputs


class OutputHead:
    """Affine map ``W_oh f + b_o`` into class logits."""
    def __init__(self, in_features, classes, rng=None):
        if in_features < 1 or classes < 1:
            raise ValueError("output head dimensions must be positive")
        self.in_features = in_features
        self.classes = classes
        if rng is None:
            w = numpy.zeros((classes, in_features))
        else:
            w = glorot_uniform(rng, (classes, in_features))
        self.W_oh = Param(w)
        self.b_o = Param(numpy.zeros(classes))

    def named_params(self, prefix=""):
        return [(prefix + "W_oh", self.W_oh), (prefix + "b_o", self.b_o)]

    def params(self):
        return [self.W_oh, self.b_o]


def head_forward(h, f):
    f = numpy.asarray(f, dtype=numpy.float64)
    if f.ndim not in (1, 2) or f.shape[-1] != h.in_features:
        raise ShapeError("output head input: expected (*, {}), got {}"
                         .format(h.in_features, f.shape))
    return f @ h.W_oh.value.T + h.b_o.value


def head_backward(h, f, d_logits):
    """Accumulates head gradients; returns the gradient w.r.t. ``f``."""
    h.W_oh.grad += _outer(d_logits, f)
    if d_logits.ndim == 1:
        h.b_o.grad += d_logits
    else:
        h.b_o.grad += d_logits.sum(axis=0)
    return d_logits @ h.W_oh.value


def cross_entropy(logits, label):
    """Categorical negative log-likelihood of ``label`` under softmax.

    With a batch of logits, ``label`` is an integer array; the loss is the
    batch mean and ``d_logits`` already carries the ``1/B`` factor.
    Returns ``(loss, d_logits)``.
    """
    logits = numpy.asarray(logits, dtype=numpy.float64)
    classes = logits.shape[-1]
    label = numpy.asarray(label)
    if label.shape != logits.shape[:-1]:
        raise ShapeError("labels of shape {} for logits of shape {}"
                         .format(label.shape, logits.shape))
    if numpy.any(label < 0) or numpy.any(label >= classes):
        raise ValueError("label out of range [0, {}): {}"
                         .format(classes, label))
    logp = log_softmax(logits)
    d_logits = softmax(logits)
    if logits.ndim == 1:
        loss = -logp[label]
        d_logits[label] -= 1.0
    else:
        rows = numpy.arange(logits.shape[0])
        loss = -numpy.mean(logp[rows, label])
        d_logits[rows, label] -= 1.0
        d_logits /= logits.shape[0]
    return float(loss), d_logits


class ConvLayer:
    """Valid, stride-1 2-D cross-correlation with a per-channel bias."""
    def __init__(self, in_channels, out_channels, kh, kw, rng=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh = kh
        self.kw = kw
        shape = (out_channels, in_channels, kh, kw)
        if rng is None:
            k = numpy.zeros(shape)
        else:
            k = glorot_uniform(rng, shape, fan_in=in_channels*kh*kw,
                               fan_out=out_channels*kh*kw)
        self.kernel = Param(k)
        self.bias = Param(numpy.zeros(out_channels))

    def output_size(self, size):
        out = size - self.kh + 1
        if out < 1:
            raise ShapeError("{}x{} kernel does not fit a {}x{} input"
                             .format(self.kh, self.kw, size, size))
        return out

    def named_params(self, prefix=""):
        return [(prefix + "kernel", self.kernel), (prefix + "bias", self.bias)]

    def params(self):
        return [self.kernel, self.bias]


class PoolLayer:
    """Non-overlapping max pooling (window = stride)."""
    def __init__(self, window=2):
        self.window = window

    def output_size(self, size):
        if size % self.window:
            raise ShapeError("pooling window {} does not divide input size {}"
                             .format(self.window, size))
        return size//self.window


def _as_image_batch(name, x, channels):
    x = numpy.asarray(x, dtype=numpy.float64)
    single = x.ndim == 3
    if single:
        x = x[numpy.newaxis]
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError("{}: expected ([N,] {}, H, W), got {}"
                         .format(name, channels, x.shape))
    return x, single


def conv_forward(layer, x):
    """Returns ``(out, cache)`` for ``x`` of shape ``([N,] C, H, W)``."""
    x, single = _as_image_batch("conv input", x, layer.in_channels)
    if x.shape[2] < layer.kh or x.shape[3] < layer.kw:
        raise ShapeError("{}x{} kernel does not fit a {}x{} input".format(
            layer.kh, layer.kw, x.shape[2], x.shape[3]))
    windows = sliding_window_view(x, (layer.kh, layer.kw), axis=(2, 3))
    out = numpy.einsum("ncijhw,ochw->noij", windows, layer.kernel.value,
                       optimize=True)
    out += layer.bias.value[:, numpy.newaxis, numpy.newaxis]
    if single:
        out = out[0]
    return out, (x, single)


def conv_backward(layer, cache, d_out):
    """Accumulates kernel and bias gradients; returns the input gradient."""
    x, single = cache
    d_out = numpy.asarray(d_out, dtype=numpy.float64)
    if single:
        d_out = d_out[numpy.newaxis]
    expected = (x.shape[0], layer.out_channels,
                x.shape[2] - layer.kh + 1, x.shape[3] - layer.kw + 1)
    if d_out.shape != expected:
        raise ShapeError("conv output gradient: expected {}, got {}"
                         .format(expected, d_out.shape))
    windows = sliding_window_view(x, (layer.kh, layer.kw), axis=(2, 3))
    layer.kernel.grad += numpy.einsum("noij,ncijhw->ochw", d_out, windows,
                                      optimize=True)
    layer.bias.grad += d_out.sum(axis=(0, 2, 3))

    padded = numpy.pad(d_out, ((0, 0), (0, 0),
                               (layer.kh - 1, layer.kh - 1),
                               (layer.kw - 1, layer.kw - 1)))
    d_windows = sliding_window_view(padded, (layer.kh, layer.kw), axis=(2, 3))
    flipped = layer.kernel.value[:, :, ::-1, ::-1]
    d_x = numpy.einsum("noijhw,ochw->ncij", d_windows, flipped,
                       optimize=True)
    if single:
        d_x = d_x[0]
    return d_x


def pool_forward(layer, x):
    """Max pooling; ties route to the first position in row-major order."""
    x = numpy.asarray(x, dtype=numpy.float64)
    single = x.ndim == 3
    if single:
        x = x[numpy.newaxis]
    if x.ndim != 4:
        raise ShapeError("pool input: expected ([N,] C, H, W), got {}"
                         .format(x.shape))
    w = layer.window
    n, c, height, width = x.shape
    oh, ow = layer.output_size(height), layer.output_size(width)
    blocks = (x.reshape(n, c, oh, w, ow, w)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, oh, ow, w*w))
    idx = numpy.argmax(blocks, axis=-1)
    out = numpy.take_along_axis(blocks, idx[..., numpy.newaxis], axis=-1)[..., 0]
    if single:
        out = out[0]
    return out, (x.shape, idx, single)


def pool_backward(layer, cache, d_out):
    shape, idx, single = cache
    d_out = numpy.asarray(d_out, dtype=numpy.float64)
    if single:
        d_out = d_out[numpy.newaxis]
    if d_out.shape != idx.shape:
        raise ShapeError("pool output gradient: expected {}, got {}"
                         .format(idx.shape, d_out.shape))
    w = layer.window
    n, c, height, width = shape
    oh, ow = height//w, width//w
    blocks = numpy.zeros((n, c, oh, ow, w*w))
    numpy.put_along_axis(blocks, idx[..., numpy.newaxis],
                         d_out[..., numpy.newaxis], axis=-1)
    d_x = (blocks.reshape(n, c, oh, ow, w, w)
                 .transpose(0, 1, 2, 4, 3, 5)
                 .reshape(shape))
    if single:
        d_x = d_x[0]
    return d_x


def activation_forward(name, x):
    if name not in ACTIVATIONS:
        raise ValueError("unknown activation {!r}, expected one of {}"
                         .format(name, sorted(ACTIVATIONS)))
    return ACTIVATIONS[name](x)


class SgdConfig:
    """Plain mini-batch SGD settings."""
    def __init__(self, learning_rate=0.001, batch_size=64, epochs=300,
                 seed=0):
        if learning_rate < 0:
            raise ValueError("learning rate must be non-negative, got {}"
                             .format(learning_rate))
        if batch_size < 1:
            raise ValueError("batch size must be positive, got {}"
                             .format(batch_size))
        if epochs < 0:
            raise ValueError("epoch count must be non-negative, got {}"
                             .format(epochs))
        if seed < 0:
            raise ValueError("seed must be unsigned, got {}".format(seed))
        if learning_rate == 0:
            logger.warning("learning rate is 0, parameters will not change")
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def __repr__(self):
        return ("SgdConfig(learning_rate={!r}, batch_size={!r}, epochs={!r}, "
                "seed={!r})".format(self.learning_rate, self.batch_size,
                                    self.epochs, self.seed))


def sgd_step(params, cfg):
    """``value -= lr*grad`` for every parameter, then zeroes the gradients."""
    for p in params:
        p.value -= cfg.learning_rate*p.grad
        p.zero_grad()


def epoch_rng(seed, epoch):
    """Generator for the shuffling of one epoch, derived from (seed, epoch)."""
    return numpy.random.default_rng([seed, epoch])


def minibatches(n, batch_size, rng):
    """Splits a shuffled ``range(n)`` into index arrays of ``batch_size``."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def numerical_gradient(f, param, eps=1e-6):
    """Central finite differences of the scalar ``f()`` w.r.t. ``param``."""
    grad = numpy.zeros_like(param.value)
    flat = param.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = f()
        flat[i] = orig - eps
        minus = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus)/(2*eps)
    return grad


def relative_error(a, b, floor=1e-8):
    a = numpy.asarray(a, dtype=numpy.float64)
    b = numpy.asarray(b, dtype=numpy.float64)
    scale = numpy.linalg.norm(a) + numpy.linalg.norm(b)
    return float(numpy.linalg.norm(a - b)/max(scale, floor))

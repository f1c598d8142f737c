"""Cascaded GRU classifiers over a sequence of spectral bands.

The band sequence of a pixel is cut into ``l`` contiguous sub-sequences
(:func:`partition_bands`). One shared first-layer GRU summarizes each
sub-sequence into a feature ``F1[i]``; a second-layer GRU runs over
``(F1[0], ..., F1[l-1])`` and its last state ``F2`` feeds the output head.

Variants:

* :attr:`Variant.base` -- head over ``F2``;
* :attr:`Variant.feature_fusion` -- head over the weighted concatenation
  ``[w1[0]*F1[0], ..., w1[l-1]*F1[l-1], w2*F2]``;
* :attr:`Variant.output_fusion` -- head over ``F2`` plus one auxiliary head
  per ``F1[i]`` during training; the loss is
  ``mean_i(w1[i]*L1[i]) + w2*L2``;
* :attr:`Variant.plain_rnn` -- a single GRU over all bands, no cascade.

Fusion weights start at 1 and are learned without constraints. The
output-fusion loss is linear in its weights, so they can also be held
fixed during training (``learn_output_weights=False``, see
:meth:`CascadeModel.trainable_params`).
"""

from collections import namedtuple, OrderedDict
from enum import Enum, unique
import csv
import logging
import os
import tempfile

import numpy

from casrnn.logging_tools import TRACE
from casrnn.numerics import ShapeError, softmax
from casrnn.nn import (StateError, Param, GruParams, OutputHead,
                       gru_forward, gru_backward, head_forward, head_backward,
                       cross_entropy, zero_grads, sgd_step, epoch_rng,
                       minibatches)


logger = logging.getLogger(__name__)


@unique
class Variant(Enum):
    """Model variants, valued by their command-line names."""
    plain_rnn = "rnn"
    base = "cas"
    feature_fusion = "cas-f"
    output_fusion = "cas-o"

    @property
    def fused(self):
        return self in (Variant.feature_fusion, Variant.output_fusion)


_VARIANT_CODES = list(Variant)


class CascadeConfig:
    """Dimensions of a cascade; ``input_dim`` is 1 for raw spectra."""
    def __init__(self, bands, sub_sequences, hidden1, hidden2, classes,
                 variant=Variant.base, input_dim=1):
        variant = Variant(variant)
        if bands < 1 or input_dim < 1:
            raise ValueError("bands and input_dim must be positive")
        if min(hidden1, classes) < 1:
            raise ValueError("hidden1 and classes must be positive, got "
                             "hidden1={}, classes={}".format(hidden1, classes))
        if variant is not Variant.plain_rnn:
            if not 1 <= sub_sequences <= bands:
                raise ValueError("sub-sequence count must lie in [1, {}], "
                                 "got {}".format(bands, sub_sequences))
            if hidden2 < 1:
                raise ValueError("hidden2 must be positive, got {}"
                                 .format(hidden2))
        self.bands = bands
        self.sub_sequences = sub_sequences
        self.hidden1 = hidden1
        self.hidden2 = hidden2
        self.classes = classes
        self.variant = variant
        self.input_dim = input_dim

    def head_width(self):
        if self.variant is Variant.plain_rnn:
            return self.hidden1
        elif self.variant is Variant.feature_fusion:
            return self.sub_sequences*self.hidden1 + self.hidden2
        else:
            return self.hidden2

    def __eq__(self, other):
        return (isinstance(other, CascadeConfig)
                and vars(self) == vars(other))

    def __repr__(self):
        return ("CascadeConfig(bands={bands}, sub_sequences={sub_sequences}, "
                "hidden1={hidden1}, hidden2={hidden2}, classes={classes}, "
                "variant={variant}, input_dim={input_dim})"
                .format(**vars(self)))


class Partition:
    """Contiguous, ordered band ranges (0-based, half-open)."""
    def __init__(self, ranges):
        self.ranges = list(ranges)

    def __len__(self):
        return len(self.ranges)

    def __iter__(self):
        return iter(self.ranges)

    def lengths(self):
        return [len(r) for r in self.ranges]


def partition_bands(k, l):
    """Cuts ``k`` bands into ``l`` groups of ``d = k//l`` bands; the last
    group also takes the ``k - l*d`` remaining bands."""
    if not 1 <= l <= k:
        raise ValueError("cannot partition {} bands into {} sub-sequences"
                         .format(k, l))
    d = k//l
    ranges = [range(i*d, (i + 1)*d) for i in range(l - 1)]
    ranges.append(range((l - 1)*d, k))
    return Partition(ranges)


class CascadeModel:
    """Parameters of one cascade variant.

    There is exactly one first-layer parameter set, shared by all
    sub-sequences. ``aux_heads`` exist only for the output-fusion variant
    and only matter for training; :meth:`drop_aux_heads` discards them.
    ``learn_output_weights`` is a training setting and is not part of
    :meth:`state`.
    """
    def __init__(self, cfg, rng=None, learn_output_weights=True):
        self.cfg = cfg
        self.learn_output_weights = learn_output_weights
        self.partition = None
        self.second_layer = None
        self.fusion_first = None
        self.fusion_second = None
        self.aux_heads = None

        self.first_layer = GruParams(cfg.input_dim, cfg.hidden1, rng)
        if cfg.variant is not Variant.plain_rnn:
            self.partition = partition_bands(cfg.bands, cfg.sub_sequences)
            self.second_layer = GruParams(cfg.hidden1, cfg.hidden2, rng)
        if cfg.variant.fused:
            self.fusion_first = Param(numpy.ones(cfg.sub_sequences))
            self.fusion_second = Param(numpy.ones(()))
        self.main_head = OutputHead(cfg.head_width(), cfg.classes, rng)
        if cfg.variant is Variant.output_fusion:
            self.aux_heads = [OutputHead(cfg.hidden1, cfg.classes, rng)
                              for _ in range(cfg.sub_sequences)]

    def drop_aux_heads(self):
        self.aux_heads = None

    def named_params(self):
        r = self.first_layer.named_params("first_layer.")
        if self.second_layer is not None:
            r += self.second_layer.named_params("second_layer.")
        if self.fusion_first is not None:
            r.append(("fusion.first", self.fusion_first))
            r.append(("fusion.second", self.fusion_second))
        r += self.main_head.named_params("main_head.")
        if self.aux_heads is not None:
            for i, head in enumerate(self.aux_heads):
                r += head.named_params("aux_head.{}.".format(i))
        return r

    def params(self):
        return [p for _, p in self.named_params()]

    def trainable_params(self):
        """Parameters updated by SGD.

        All of them, unless the output-fusion weights are held fixed; their
        gradients are still accumulated by :func:`cascade_backward`.
        """
        if (self.cfg.variant is not Variant.output_fusion
                or self.learn_output_weights):
            return self.params()
        fixed = (self.fusion_first, self.fusion_second)
        return [p for p in self.params() if all(p is not f for f in fixed)]

    def state(self, prefix=""):
        """Hyperparameters and parameter values as an ordered tensor map."""
        cfg = self.cfg
        fields = (("bands", cfg.bands), ("sub_sequences", cfg.sub_sequences),
                  ("hidden1", cfg.hidden1), ("hidden2", cfg.hidden2),
                  ("classes", cfg.classes),
                  ("variant", _VARIANT_CODES.index(cfg.variant)),
                  ("input_dim", cfg.input_dim))
        tensors = OrderedDict()
        for name, value in fields:
            tensors[prefix + "config." + name] = numpy.float64(value)
        for name, p in self.named_params():
            tensors[prefix + name] = p.value.copy()
        return tensors

    @classmethod
    def from_state(cls, tensors, prefix=""):
        def scalar(name):
            try:
                return int(tensors[prefix + "config." + name])
            except KeyError:
                raise StateError("checkpoint lacks {}config.{}"
                                 .format(prefix, name)) from None
        code = scalar("variant")
        if not 0 <= code < len(_VARIANT_CODES):
            raise StateError("unknown variant code {} in checkpoint"
                             .format(code))
        cfg = CascadeConfig(scalar("bands"), scalar("sub_sequences"),
                            scalar("hidden1"), scalar("hidden2"),
                            scalar("classes"), _VARIANT_CODES[code],
                            scalar("input_dim"))
        model = cls(cfg)
        if (cfg.variant is Variant.output_fusion
                and prefix + "aux_head.0.W_oh" not in tensors):
            model.drop_aux_heads()
        model.load_values(tensors, prefix)
        return model

    def load_values(self, tensors, prefix=""):
        for name, p in self.named_params():
            try:
                value = tensors[prefix + name]
            except KeyError:
                raise StateError("checkpoint lacks tensor {}{}"
                                 .format(prefix, name)) from None
            if value.shape != p.shape:
                raise ShapeError("tensor {}{}: expected {}, got {}".format(
                    prefix, name, p.shape, value.shape))
            p.value[...] = value


def count_parameters(model):
    return sum(p.value.size for p in model.params())


CascadeOutput = namedtuple("CascadeOutput",
                           "logits traces first_features second_feature "
                           "head_input")


def _as_sequence(m, x):
    x = numpy.asarray(x, dtype=numpy.float64)
    cfg = m.cfg
    if x.ndim not in (2, 3) or x.shape[0] != cfg.bands \
            or x.shape[-1] != cfg.input_dim:
        raise ShapeError("cascade input: expected ({}, [B,] {}), got {}"
                         .format(cfg.bands, cfg.input_dim, x.shape))
    return x


def cascade_forward(m, x):
    """Runs the model on ``x`` of shape ``(k, D)`` or ``(k, B, D)``.

    Returns a :class:`CascadeOutput` holding the logits, the GRU traces
    needed by :func:`cascade_backward`, the first-layer features ``F1``
    and the second-layer feature ``F2`` (``None`` for the plain RNN).
    """
    x = _as_sequence(m, x)
    if m.cfg.variant is Variant.plain_rnn:
        h, trace = gru_forward(m.first_layer, x)
        logits = head_forward(m.main_head, h)
        return CascadeOutput(logits, ([trace], None), [h], None, h)

    first_traces = []
    features = []
    for band_range in m.partition:
        f, trace = gru_forward(m.first_layer,
                               x[band_range.start:band_range.stop])
        features.append(f)
        first_traces.append(trace)
    f2, second_trace = gru_forward(m.second_layer, features)

    if m.cfg.variant is Variant.feature_fusion:
        w1 = m.fusion_first.value
        w2 = m.fusion_second.value
        head_input = numpy.concatenate(
            [w1[i]*f for i, f in enumerate(features)] + [w2*f2], axis=-1)
    else:
        head_input = f2
    logits = head_forward(m.main_head, head_input)
    return CascadeOutput(logits, (first_traces, second_trace), features, f2,
                         head_input)


LossTerms = namedtuple("LossTerms",
                       "loss main_loss aux_losses d_logits d_aux_logits")


def cascade_loss(m, out, label):
    """Training loss of ``out`` for the 0-based ``label`` (or label batch).

    Returns :class:`LossTerms`; the cotangents in it are already scaled by
    the output-fusion weights and consumed by :func:`cascade_backward`.
    """
    main_loss, d_logits = cross_entropy(out.logits, label)
    if m.cfg.variant is not Variant.output_fusion:
        return LossTerms(main_loss, main_loss, None, d_logits, None)

    if m.aux_heads is None:
        raise StateError("output-fusion loss needs the auxiliary heads")
    l = m.cfg.sub_sequences
    w1 = m.fusion_first.value
    w2 = float(m.fusion_second.value)
    aux_losses = []
    d_aux = []
    for i, (head, f) in enumerate(zip(m.aux_heads, out.first_features)):
        loss_i, d_i = cross_entropy(head_forward(head, f), label)
        aux_losses.append(loss_i)
        d_aux.append(d_i*(w1[i]/l))
    total = float(numpy.dot(w1, aux_losses))/l + w2*main_loss
    return LossTerms(total, main_loss, aux_losses, d_logits*w2, d_aux)


def cascade_backward(m, out, terms):
    """Accumulates all parameter gradients for ``terms.loss``.

    Returns the gradient with respect to the input, shaped like it.
    """
    cfg = m.cfg
    if cfg.variant is Variant.plain_rnn:
        d_h = head_backward(m.main_head, out.head_input, terms.d_logits)
        (trace, ), _ = out.traces
        return numpy.stack(gru_backward(m.first_layer, trace, d_h))

    first_traces, second_trace = out.traces
    l = cfg.sub_sequences
    d_head_input = head_backward(m.main_head, out.head_input, terms.d_logits)
    d_first = [numpy.zeros_like(f) for f in out.first_features]

    if cfg.variant is Variant.feature_fusion:
        h1 = cfg.hidden1
        w1 = m.fusion_first.value
        for i, f in enumerate(out.first_features):
            block = d_head_input[..., i*h1:(i + 1)*h1]
            m.fusion_first.grad[i] += numpy.sum(block*f)
            d_first[i] += w1[i]*block
        block = d_head_input[..., l*h1:]
        m.fusion_second.grad += numpy.sum(block*out.second_feature)
        d_second = m.fusion_second.value*block
    else:
        d_second = d_head_input

    if cfg.variant is Variant.output_fusion:
        if m.aux_heads is None:
            raise StateError("output-fusion backward needs the auxiliary "
                             "heads")
        m.fusion_first.grad += numpy.asarray(terms.aux_losses)/l
        m.fusion_second.grad += terms.main_loss
        for i, head in enumerate(m.aux_heads):
            d_first[i] += head_backward(head, out.first_features[i],
                                        terms.d_aux_logits[i])

    for i, d in enumerate(gru_backward(m.second_layer, second_trace,
                                       d_second)):
        d_first[i] += d

    d_x = numpy.zeros(((cfg.bands, ) + out.first_features[0].shape[:-1]
                       + (cfg.input_dim, )))
    for band_range, trace, d in zip(m.partition, first_traces, d_first):
        d_x[band_range.start:band_range.stop] = numpy.stack(
            gru_backward(m.first_layer, trace, d))
    return d_x


def predict(m, x):
    """Class index (0-based) of ``x``; auxiliary heads are never used."""
    logits = cascade_forward(m, x).logits
    return numpy.argmax(logits, axis=-1)


def predict_proba(m, x):
    return softmax(cascade_forward(m, x).logits)


def samples_to_sequence(samples):
    """``(N, k, D)`` samples → ``(k, N, D)`` cascade input."""
    return numpy.ascontiguousarray(numpy.swapaxes(samples, 0, 1))


def spectral_samples(spectra):
    """``(N, k)`` spectra → ``(N, k, 1)`` samples with scalar band inputs."""
    spectra = numpy.asarray(spectra, dtype=numpy.float64)
    return spectra[:, :, numpy.newaxis]


def predict_batch(m, samples, batch_size=256):
    """Predicted 0-based classes of ``(N, k, D)`` samples."""
    samples = numpy.asarray(samples, dtype=numpy.float64)
    out = numpy.zeros(len(samples), dtype=numpy.int64)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        out[start:start + len(chunk)] = predict(
            m, samples_to_sequence(chunk))
    return out


EpochRecord = namedtuple("EpochRecord", "stage epoch loss train_oa")


def train_cascade(m, sgd, samples, labels, stage="cascade"):
    """Mini-batch SGD over ``(N, k, D)`` samples with 0-based ``labels``.

    Every epoch reshuffles with a generator derived from
    ``(sgd.seed, epoch)``. Returns one :class:`EpochRecord` per epoch;
    the train OA counts the predictions made during the epoch's forward
    passes.
    """
    samples = numpy.asarray(samples, dtype=numpy.float64)
    labels = numpy.asarray(labels, dtype=numpy.int64)
    if len(samples) == 0:
        raise ValueError("training set is empty")
    if len(samples) != len(labels):
        raise ShapeError("{} samples but {} labels"
                         .format(len(samples), len(labels)))
    all_params = m.params()
    params = m.trainable_params()
    log = []
    for epoch in range(sgd.epochs):
        total_loss = 0.0
        correct = 0
        for idx in minibatches(len(samples), sgd.batch_size,
                               epoch_rng(sgd.seed, epoch)):
            zero_grads(all_params)
            out = cascade_forward(m, samples_to_sequence(samples[idx]))
            terms = cascade_loss(m, out, labels[idx])
            cascade_backward(m, out, terms)
            sgd_step(params, sgd)
            total_loss += terms.loss*len(idx)
            correct += int(numpy.sum(
                numpy.argmax(out.logits, axis=-1) == labels[idx]))
            logger.log(TRACE, "%s epoch %d batch of %d: loss %.6f",
                       stage, epoch, len(idx), terms.loss)
        record = EpochRecord(stage, epoch, total_loss/len(samples),
                             correct/len(samples))
        logger.info("%s epoch %d: loss %.6f, train OA %.4f",
                    record.stage, epoch, record.loss, record.train_oa)
        log.append(record)
    return log


def save_training_log(filename, log):
    directory = os.path.abspath(os.path.dirname(filename))
    with tempfile.NamedTemporaryFile("w", dir=directory, delete=False,
                                     encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(EpochRecord._fields)
        for r in log:
            writer.writerow([r.stage, r.epoch, repr(r.loss), repr(r.train_oa)])
        tmpname = f.name
    os.replace(tmpname, filename)

"""Spectral-spatial cascade: a per-band CNN feeding the cascade.

Around each pixel an ``ω×ω×k`` patch is cut (mirror-reflected at the image
borders). Each of its ``k`` band matrices goes through the same small CNN
-- conv, pool, conv, pool, conv, each conv followed by the activation --
and comes out as one feature vector. The ``k`` vectors form the input
sequence of a :class:`casrnn.cascade.CascadeModel`.

Training follows three stages:

A. pretrain the CNN with its own output head on the ``N*k`` band matrices,
   each labeled with its pixel's class;
B. freeze the CNN and train the cascade on the CNN features;
C. fine-tune the whole network jointly.
"""

from collections import OrderedDict
import logging

import numpy

from casrnn.cascade import (CascadeModel, EpochRecord, cascade_forward,
                            cascade_loss, cascade_backward, train_cascade,
                            samples_to_sequence)
from casrnn.logging_tools import TRACE
from casrnn.numerics import ShapeError, ACTIVATIONS, activation_derivative
from casrnn.nn import (StateError, SgdConfig, OutputHead, ConvLayer,
                       PoolLayer, conv_forward, conv_backward, pool_forward,
                       pool_backward, activation_forward, head_forward,
                       head_backward, cross_entropy, zero_grads, sgd_step,
                       epoch_rng, minibatches)


logger = logging.getLogger(__name__)


DEFAULT_CONV_SPECS = ((4, 4, 32), (5, 5, 64), (4, 4, 128))


class SpatialConfig:
    """Patch size and CNN layout.

    ``conv_specs`` lists ``(kh, kw, out_channels)``; every conv except the
    last is followed by a pool of ``pool_window``. The spatial size must
    trace down to exactly 1.
    """
    def __init__(self, patch_size=27, conv_specs=DEFAULT_CONV_SPECS,
                 activation="tanh", pool_window=2):
        if patch_size < 1 or patch_size % 2 == 0:
            raise ValueError("patch size must be odd, got {}"
                             .format(patch_size))
        if activation not in ACTIVATIONS:
            raise ValueError("unknown activation {!r}, expected one of {}"
                             .format(activation, sorted(ACTIVATIONS)))
        if not conv_specs:
            raise ValueError("at least one convolution is needed")
        self.patch_size = patch_size
        self.conv_specs = tuple(tuple(int(v) for v in s) for s in conv_specs)
        self.activation = activation
        self.pool_window = pool_window
        self.trace()

    @property
    def feature_dim(self):
        return self.conv_specs[-1][2]

    def trace(self):
        """``[(channels, size), ...]`` after every conv and pool.

        Raises :class:`ShapeError` if the patch does not reduce to 1×1.
        """
        size = self.patch_size
        channels = 1
        steps = []
        pool = PoolLayer(self.pool_window)
        for i, (kh, kw, out) in enumerate(self.conv_specs):
            if kh != kw:
                raise ShapeError("only square kernels are supported, got "
                                 "{}x{}".format(kh, kw))
            size = size - kh + 1
            if size < 1:
                raise ShapeError("{}x{} kernel of layer {} does not fit"
                                 .format(kh, kw, i + 1))
            channels = out
            steps.append((channels, size))
            if i < len(self.conv_specs) - 1:
                size = pool.output_size(size)
                steps.append((channels, size))
        if size != 1:
            raise ShapeError("patch size {} traces to {}x{}, not 1x1".format(
                self.patch_size, size, size))
        return steps

    def __eq__(self, other):
        return isinstance(other, SpatialConfig) and vars(self) == vars(other)


class BandCnn:
    """One CNN parameter set applied to every band matrix."""
    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        self.convs = []
        in_channels = 1
        for kh, kw, out in cfg.conv_specs:
            self.convs.append(ConvLayer(in_channels, out, kh, kw, rng))
            in_channels = out
        self.pools = [PoolLayer(cfg.pool_window)
                      for _ in range(len(self.convs) - 1)]

    def named_params(self, prefix=""):
        r = []
        for i, conv in enumerate(self.convs):
            r += conv.named_params("{}conv.{}.".format(prefix, i))
        return r

    def params(self):
        return [p for _, p in self.named_params()]


def band_cnn_forward(bc, images):
    """``(N, 1, ω, ω)`` images → ``(N, F)`` features and a cache."""
    x = numpy.asarray(images, dtype=numpy.float64)
    size = bc.cfg.patch_size
    if x.ndim != 4 or x.shape[1:] != (1, size, size):
        raise ShapeError("band CNN input: expected (N, 1, {0}, {0}), got {1}"
                         .format(size, x.shape))
    caches = []
    for i, conv in enumerate(bc.convs):
        x, conv_cache = conv_forward(conv, x)
        x = activation_forward(bc.cfg.activation, x)
        pool_cache = None
        if i < len(bc.pools):
            activated = x
            x, pool_cache = pool_forward(bc.pools[i], x)
            caches.append((conv_cache, activated, pool_cache))
        else:
            caches.append((conv_cache, x, None))
    return x.reshape(x.shape[0], -1), caches


def band_cnn_backward(bc, caches, d_features):
    """Accumulates CNN gradients; returns the gradient w.r.t. the images."""
    conv_cache, activated, _ = caches[-1]
    d = numpy.asarray(d_features, dtype=numpy.float64).reshape(activated.shape)
    for i in reversed(range(len(bc.convs))):
        conv_cache, activated, pool_cache = caches[i]
        if pool_cache is not None:
            d = pool_backward(bc.pools[i], pool_cache, d)
        d = d*activation_derivative(bc.cfg.activation, activated)
        d = conv_backward(bc.convs[i], conv_cache, d)
    return d


def _reflect(indices, size):
    if size == 1:
        return numpy.zeros_like(indices)
    period = 2*(size - 1)
    indices = numpy.mod(indices, period)
    return numpy.where(indices >= size, period - indices, indices)


def extract_patch(cube, row, col, size):
    """``size×size×k`` window centered on ``(row, col)``.

    Positions outside the image are mirror-reflected about the border
    pixels, so ``patch[h][h]`` is always the pixel itself (``h = size//2``).
    """
    if size < 1 or size % 2 == 0:
        raise ValueError("patch size must be odd to have a center, got {}"
                         .format(size))
    if not (0 <= row < cube.m and 0 <= col < cube.n):
        raise ValueError("pixel ({}, {}) outside the {}x{} image"
                         .format(row, col, cube.m, cube.n))
    half = size//2
    offsets = numpy.arange(-half, half + 1)
    rows = _reflect(row + offsets, cube.m)
    cols = _reflect(col + offsets, cube.n)
    return cube.values[numpy.ix_(rows, cols)]


def extract_patches(cube, pixels, size):
    """Patches of every ``(row, col, ...)`` entry: ``(N, size, size, k)``."""
    pixels = numpy.asarray(pixels, dtype=numpy.int64).reshape(len(pixels), -1)
    out = numpy.zeros((len(pixels), size, size, cube.k))
    for i, (row, col) in enumerate(pixels[:, :2]):
        out[i] = extract_patch(cube, row, col, size)
    return out


def _band_images(patches):
    # (N, ω, ω, k) -> (N*k, 1, ω, ω), pixel-major then band
    n, h, w, k = patches.shape
    images = numpy.transpose(patches, (0, 3, 1, 2)).reshape(n*k, 1, h, w)
    return numpy.ascontiguousarray(images)


def band_features(bc, patch):
    """The ``k`` feature vectors of one ``ω×ω×k`` patch, in band order."""
    patch = numpy.asarray(patch, dtype=numpy.float64)
    if patch.ndim != 3:
        raise ShapeError("patch must be (ω, ω, k), got {}"
                         .format(patch.shape))
    features, _ = band_cnn_forward(bc, _band_images(patch[numpy.newaxis]))
    return list(features)


def patch_features(bc, patches, batch_size=64):
    """``(N, ω, ω, k)`` patches → ``(N, k, F)`` features."""
    patches = numpy.asarray(patches, dtype=numpy.float64)
    n, _, _, k = patches.shape
    out = numpy.zeros((n, k, bc.cfg.feature_dim))
    for start in range(0, n, batch_size):
        chunk = patches[start:start + batch_size]
        features, _ = band_cnn_forward(bc, _band_images(chunk))
        out[start:start + len(chunk)] = features.reshape(len(chunk), k, -1)
    return out


STAGES = ("A", "B", "C")


class StageSchedule:
    """Epoch counts of the pretrain, frozen-CNN and fine-tune stages."""
    def __init__(self, pretrain=100, cascade=100, finetune=100):
        if min(pretrain, cascade, finetune) < 0:
            raise ValueError("stage epoch counts must be non-negative")
        self.pretrain = pretrain
        self.cascade = cascade
        self.finetune = finetune

    def epochs(self, stage):
        return {"A": self.pretrain, "B": self.cascade,
                "C": self.finetune}[stage]


class SsCascadeModel:
    """Band CNN, cascade over its features, and the stage-A head."""
    def __init__(self, spatial_cfg, cascade_cfg, rng=None):
        if cascade_cfg.input_dim != spatial_cfg.feature_dim:
            raise ShapeError("cascade input dim {} does not match CNN "
                             "feature dim {}".format(cascade_cfg.input_dim,
                                                     spatial_cfg.feature_dim))
        self.spatial_cfg = spatial_cfg
        self.band_cnn = BandCnn(spatial_cfg, rng)
        self.cascade = CascadeModel(cascade_cfg, rng)
        self.pretrain_head = OutputHead(spatial_cfg.feature_dim,
                                        cascade_cfg.classes, rng)
        # last completed stage, None before stage A
        self.stage = None

    def named_params(self):
        return (self.band_cnn.named_params("band_cnn.")
                + [("cascade." + name, p)
                   for name, p in self.cascade.named_params()]
                + self.pretrain_head.named_params("pretrain_head."))

    def params(self):
        return [p for _, p in self.named_params()]

    def conv_checksum(self):
        """Byte-exact fingerprint of the CNN parameters."""
        return b"".join(p.value.tobytes() for p in self.band_cnn.params())

    def state(self):
        cfg = self.spatial_cfg
        tensors = OrderedDict()
        tensors["spatial.patch_size"] = numpy.float64(cfg.patch_size)
        tensors["spatial.conv_specs"] = numpy.array(cfg.conv_specs,
                                                    dtype=numpy.float64)
        tensors["spatial.activation"] = numpy.float64(
            sorted(ACTIVATIONS).index(cfg.activation))
        tensors["spatial.pool_window"] = numpy.float64(cfg.pool_window)
        tensors["meta.stage"] = numpy.float64(
            0 if self.stage is None else STAGES.index(self.stage) + 1)
        for name, p in self.band_cnn.named_params("band_cnn."):
            tensors[name] = p.value.copy()
        tensors.update(self.cascade.state("cascade."))
        for name, p in self.pretrain_head.named_params("pretrain_head."):
            tensors[name] = p.value.copy()
        return tensors

    @classmethod
    def from_state(cls, tensors):
        names = sorted(ACTIVATIONS)
        try:
            activation = int(tensors["spatial.activation"])
            stage = int(tensors["meta.stage"])
            if not 0 <= activation < len(names):
                raise StateError("unknown activation code {} in checkpoint"
                                 .format(activation))
            if not 0 <= stage <= len(STAGES):
                raise StateError("unknown stage code {} in checkpoint"
                                 .format(stage))
            cfg = SpatialConfig(
                int(tensors["spatial.patch_size"]),
                [tuple(int(v) for v in row)
                 for row in tensors["spatial.conv_specs"]],
                names[activation],
                int(tensors["spatial.pool_window"]))
        except KeyError as e:
            raise StateError("checkpoint lacks {}".format(e)) from None
        cascade = CascadeModel.from_state(tensors, "cascade.")
        model = cls(cfg, cascade.cfg)
        model.cascade = cascade
        model.stage = None if stage == 0 else STAGES[stage - 1]
        for name, p in (model.band_cnn.named_params("band_cnn.")
                        + model.pretrain_head.named_params("pretrain_head.")):
            if name not in tensors:
                raise StateError("checkpoint lacks tensor {}".format(name))
            if tensors[name].shape != p.shape:
                raise ShapeError("tensor {}: expected {}, got {}".format(
                    name, p.shape, tensors[name].shape))
            p.value[...] = tensors[name]
        return model


def pretrain_dataset(patches, labels):
    """Every band matrix of every patch, labeled with its pixel's class.

    Returns ``(images, labels)`` with ``N*k`` entries.
    """
    patches = numpy.asarray(patches, dtype=numpy.float64)
    k = patches.shape[3]
    return _band_images(patches), numpy.repeat(
        numpy.asarray(labels, dtype=numpy.int64), k)


def _with_epochs(sgd, epochs):
    return SgdConfig(sgd.learning_rate, sgd.batch_size, epochs, sgd.seed)


def pretrain_conv(bc, head, patches, labels, sgd, stage="A"):
    """Trains the CNN and ``head`` on the per-band pretraining set."""
    if len(patches) == 0:
        raise ValueError("training set is empty")
    images, band_labels = pretrain_dataset(patches, labels)
    logger.debug("pretraining on %d band matrices", len(images))
    params = bc.params() + head.params()
    zero_grads(params)
    log = []
    for epoch in range(sgd.epochs):
        total_loss = 0.0
        correct = 0
        for idx in minibatches(len(images), sgd.batch_size,
                               epoch_rng(sgd.seed, epoch)):
            features, caches = band_cnn_forward(bc, images[idx])
            logits = head_forward(head, features)
            loss, d_logits = cross_entropy(logits, band_labels[idx])
            band_cnn_backward(bc, caches,
                              head_backward(head, features, d_logits))
            sgd_step(params, sgd)
            total_loss += loss*len(idx)
            correct += int(numpy.sum(
                numpy.argmax(logits, axis=-1) == band_labels[idx]))
            logger.log(TRACE, "%s epoch %d batch of %d: loss %.6f",
                       stage, epoch, len(idx), loss)
        record = EpochRecord(stage, epoch, total_loss/len(images),
                             correct/len(images))
        logger.info("%s epoch %d: loss %.6f, train OA %.4f",
                    stage, epoch, record.loss, record.train_oa)
        log.append(record)
    return log


def sscas_forward(model, patches):
    """Forward pass over ``(N, ω, ω, k)`` patches.

    Returns ``(cascade_output, cnn_caches)``.
    """
    patches = numpy.asarray(patches, dtype=numpy.float64)
    n, _, _, k = patches.shape
    features, caches = band_cnn_forward(model.band_cnn, _band_images(patches))
    seq = samples_to_sequence(features.reshape(n, k, -1))
    return cascade_forward(model.cascade, seq), caches


def sscas_backward(model, out, caches, terms):
    d_seq = cascade_backward(model.cascade, out, terms)
    d_features = numpy.swapaxes(d_seq, 0, 1).reshape(-1, d_seq.shape[-1])
    return band_cnn_backward(model.band_cnn, caches, d_features)


def finetune(model, patches, labels, sgd, stage="C"):
    """Joint training of the CNN and the cascade."""
    labels = numpy.asarray(labels, dtype=numpy.int64)
    all_params = model.band_cnn.params() + model.cascade.params()
    params = model.band_cnn.params() + model.cascade.trainable_params()
    log = []
    for epoch in range(sgd.epochs):
        total_loss = 0.0
        correct = 0
        for idx in minibatches(len(patches), sgd.batch_size,
                               epoch_rng(sgd.seed, epoch)):
            zero_grads(all_params)
            out, caches = sscas_forward(model, patches[idx])
            terms = cascade_loss(model.cascade, out, labels[idx])
            sscas_backward(model, out, caches, terms)
            sgd_step(params, sgd)
            total_loss += terms.loss*len(idx)
            correct += int(numpy.sum(
                numpy.argmax(out.logits, axis=-1) == labels[idx]))
        record = EpochRecord(stage, epoch, total_loss/len(patches),
                             correct/len(patches))
        logger.info("%s epoch %d: loss %.6f, train OA %.4f",
                    stage, epoch, record.loss, record.train_oa)
        log.append(record)
    return log


def run_stage(model, stage, sgd, patches, labels, epochs):
    """Runs one training stage; stages must run in the order A, B, C."""
    if stage not in STAGES:
        raise ValueError("unknown stage {!r}".format(stage))
    expected = None if stage == "A" else STAGES[STAGES.index(stage) - 1]
    if model.stage != expected:
        raise StateError("stage {} needs stage {} to have completed, last "
                         "completed stage is {}".format(
                             stage, expected, model.stage))
    patches = numpy.asarray(patches, dtype=numpy.float64)
    if len(patches) == 0:
        raise ValueError("training set is empty")
    sgd = _with_epochs(sgd, epochs)
    logger.info("stage %s: %d epochs on %d pixels", stage, epochs,
                len(patches))
    if stage == "A":
        log = pretrain_conv(model.band_cnn, model.pretrain_head, patches,
                            labels, sgd, stage)
    elif stage == "B":
        # the CNN is frozen, so its features are computed once
        features = patch_features(model.band_cnn, patches)
        log = train_cascade(model.cascade, sgd, features, labels, stage)
    else:
        log = finetune(model, patches, labels, sgd, stage)
    model.stage = stage
    return log


def train_sscas(model, sgd, schedule, patches, labels):
    """Runs stages A, B and C with the epoch counts of ``schedule``."""
    log = []
    for stage in STAGES:
        log += run_stage(model, stage, sgd, patches, labels,
                         schedule.epochs(stage))
    return log


def predict_sscas(model, patches, batch_size=64):
    """Predicted 0-based classes of ``(N, ω, ω, k)`` patches."""
    patches = numpy.asarray(patches, dtype=numpy.float64)
    out = numpy.zeros(len(patches), dtype=numpy.int64)
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size]
        result, _ = sscas_forward(model, chunk)
        out[start:start + len(chunk)] = numpy.argmax(result.logits, axis=-1)
    return out

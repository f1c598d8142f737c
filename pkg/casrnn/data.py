"""Hyperspectral cubes, ground truth, train/test splits and synthetic data.

Binary formats (all little-endian):

* cube ``HSC1``: magic, u16 version (1), u16 reserved (0), u32 m, u32 n,
  u32 k, then ``m*n*k`` f64 values, pixel-major with the bands of a pixel
  contiguous;
* labels ``HSL1``: magic, u16 version (1), u16 reserved (0), u32 m, u32 n,
  then ``m*n`` u16 labels, row-major.

Splits are UTF-8 CSV files with the header ``row,col,class,role``.

Conversion from the community ``.mat`` files is an external preprocessing
step: load the array with any tool, then call :func:`save_cube` and
:func:`save_labels`.
"""

import csv
import logging
import os
import struct
import tempfile

import numpy


logger = logging.getLogger(__name__)


class FormatError(ValueError):
    """Raised when a binary file does not parse; ``offset`` is the byte
    position where parsing failed."""
    def __init__(self, message, offset):
        ValueError.__init__(self, "{} (at byte {})".format(message, offset))
        self.offset = offset


_CUBE_MAGIC = b"HSC1"
_LABEL_MAGIC = b"HSL1"
_FORMAT_VERSION = 1
_MAX_ELEMENTS = 1 << 34


class ByteReader:
    """Sequential reader over a byte string that reports positioned errors."""
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what):
        if n < 0:
            raise FormatError("negative {} length {}".format(what, n),
                              self.offset)
        if self.offset + n > len(self.data):
            raise FormatError("truncated {}: need {} bytes, {} left".format(
                what, n, len(self.data) - self.offset), self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def magic(self, expected):
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError("bad magic {!r}, expected {!r}"
                              .format(got, expected.decode()), 0)

    def array(self, dtype, count, what):
        dtype = numpy.dtype(dtype)
        if count > _MAX_ELEMENTS:
            raise FormatError("{} element count {} overflows"
                              .format(what, count), self.offset)
        raw = self.take(dtype.itemsize*count, what)
        return numpy.frombuffer(raw, dtype=dtype).copy()

    def finish(self):
        if self.offset != len(self.data):
            raise FormatError("{} trailing bytes"
                              .format(len(self.data) - self.offset),
                              self.offset)


def store_bytes(filename, payload):
    """Writes ``payload`` atomically (temporary file, then rename)."""
    directory = os.path.abspath(os.path.dirname(filename))
    with tempfile.NamedTemporaryFile("wb", dir=directory, delete=False) as f:
        f.write(payload)
        tmpname = f.name
    os.replace(tmpname, filename)


def _read_file(filename):
    with open(filename, "rb") as f:
        return f.read()


class HsiCube:
    """An ``m×n×k`` image, bands contiguous per pixel."""
    def __init__(self, values):
        values = numpy.ascontiguousarray(values, dtype=numpy.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError("cube must have shape (m, n, k) with positive "
                             "sizes, got {}".format(values.shape))
        if not numpy.all(numpy.isfinite(values)):
            raise ValueError("cube contains non-finite values")
        self.values = values

    @property
    def m(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[1]

    @property
    def k(self):
        return self.values.shape[2]

    def spectrum(self, row, col):
        return self.values[row, col]


class GroundTruth:
    """Per-pixel labels: 0 is unlabeled, 1..C are classes."""
    def __init__(self, labels):
        labels = numpy.ascontiguousarray(labels, dtype=numpy.int64)
        if labels.ndim != 2:
            raise ValueError("labels must be a 2-D array, got shape {}"
                             .format(labels.shape))
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        self.labels = labels

    @property
    def classes(self):
        return int(self.labels.max()) if self.labels.size else 0

    def class_counts(self):
        """Labeled pixel count of each class 1..C, as a list."""
        counts = numpy.bincount(self.labels.reshape(-1),
                                minlength=self.classes + 1)
        return [int(c) for c in counts[1:]]

    def check_matches(self, cube):
        if self.labels.shape != (cube.m, cube.n):
            raise ValueError("labels {} do not match cube {}x{}".format(
                self.labels.shape, cube.m, cube.n))


def save_cube(filename, cube):
    header = struct.pack("<4sHHIII", _CUBE_MAGIC, _FORMAT_VERSION, 0,
                         cube.m, cube.n, cube.k)
    store_bytes(filename, header + cube.values.astype("<f8").tobytes())


def parse_cube(data):
    r = ByteReader(data)
    r.magic(_CUBE_MAGIC)
    version, _ = r.unpack("<HH", "header")
    if version != _FORMAT_VERSION:
        raise FormatError("unsupported cube version {}".format(version), 4)
    m, n, k = r.unpack("<III", "dimensions")
    if 0 in (m, n, k):
        raise FormatError("zero dimension in {}x{}x{}".format(m, n, k), 8)
    values = r.array("<f8", m*n*k, "cube values")
    r.finish()
    return HsiCube(values.reshape(m, n, k))


def load_cube(filename):
    return parse_cube(_read_file(filename))


def save_labels(filename, gt):
    if gt.labels.size and gt.labels.max() > 0xffff:
        raise ValueError("class index does not fit in u16")
    m, n = gt.labels.shape
    header = struct.pack("<4sHHII", _LABEL_MAGIC, _FORMAT_VERSION, 0, m, n)
    store_bytes(filename, header + gt.labels.astype("<u2").tobytes())


def parse_labels(data):
    r = ByteReader(data)
    r.magic(_LABEL_MAGIC)
    version, _ = r.unpack("<HH", "header")
    if version != _FORMAT_VERSION:
        raise FormatError("unsupported label version {}".format(version), 4)
    m, n = r.unpack("<II", "dimensions")
    labels = r.array("<u2", m*n, "labels")
    r.finish()
    return GroundTruth(labels.reshape(m, n))


def load_labels(filename):
    return parse_labels(_read_file(filename))


def normalize(cube, mask=None):
    """Per-band min-max scaling.

    Extrema come from every pixel, or only from the pixels where the
    boolean ``m×n`` ``mask`` is set (train-only fit; other pixels may then
    fall outside [0, 1]). Constant bands map to 0.
    """
    v = cube.values
    fit = v.reshape(-1, cube.k) if mask is None else v[mask]
    if fit.shape[0] == 0:
        raise ValueError("normalization mask selects no pixels")
    lo = fit.min(axis=0)
    span = fit.max(axis=0) - lo
    constant = span == 0
    if numpy.any(constant):
        logger.warning("%d constant band(s) mapped to 0: %s",
                       int(constant.sum()),
                       numpy.flatnonzero(constant).tolist())
    scaled = numpy.where(constant, 0.0,
                         (v - lo)/numpy.where(constant, 1.0, span))
    return HsiCube(scaled)


TRAIN = "train"
TEST = "test"


class SplitSpec:
    """Train and test pixels as ``(row, col, class)`` integer rows."""
    def __init__(self, train, test, seed=None):
        self.train = numpy.asarray(train, dtype=numpy.int64).reshape(-1, 3)
        self.test = numpy.asarray(test, dtype=numpy.int64).reshape(-1, 3)
        self.seed = seed

    def entries(self):
        for row in self.train:
            yield int(row[0]), int(row[1]), int(row[2]), TRAIN
        for row in self.test:
            yield int(row[0]), int(row[1]), int(row[2]), TEST

    def train_counts(self, classes):
        return numpy.bincount(self.train[:, 2], minlength=classes + 1)[1:]

    def test_counts(self, classes):
        return numpy.bincount(self.test[:, 2], minlength=classes + 1)[1:]

    def train_mask(self, shape):
        mask = numpy.zeros(shape, dtype=bool)
        mask[self.train[:, 0], self.train[:, 1]] = True
        return mask

    def validate(self, gt):
        """Checks that no pixel repeats and that classes match ``gt``."""
        both = numpy.concatenate([self.train, self.test])
        flat = both[:, 0]*gt.labels.shape[1] + both[:, 1]
        if len(numpy.unique(flat)) != len(flat):
            raise ValueError("split lists a pixel more than once")
        truth = gt.labels[both[:, 0], both[:, 1]]
        bad = numpy.flatnonzero(truth != both[:, 2])
        if len(bad):
            r, c, k = both[bad[0]]
            raise ValueError("split entry ({}, {}) has class {}, ground "
                             "truth says {}".format(r, c, k, truth[bad[0]]))


def build_split(gt, per_class_train, seed):
    """Draws ``per_class_train[c-1]`` training pixels of every class c.

    The draw is uniform without replacement, from a generator seeded with
    ``seed``; all remaining labeled pixels form the test set.
    """
    classes = gt.classes
    if len(per_class_train) != classes:
        raise ValueError("{} train counts given for {} classes"
                         .format(len(per_class_train), classes))
    rng = numpy.random.default_rng(seed)
    width = gt.labels.shape[1]
    train, test = [], []
    for c in range(1, classes + 1):
        pixels = numpy.flatnonzero(gt.labels.reshape(-1) == c)
        want = per_class_train[c - 1]
        if want > len(pixels):
            raise ValueError("class {} has {} labeled pixels, {} requested "
                             "for training".format(c, len(pixels), want))
        chosen = numpy.sort(rng.choice(pixels, size=want, replace=False))
        rest = numpy.setdiff1d(pixels, chosen, assume_unique=True)
        for group, out in (chosen, train), (rest, test):
            out.append(numpy.stack([group//width, group % width,
                                    numpy.full(len(group), c)], axis=1))
    split = SplitSpec(numpy.concatenate(train), numpy.concatenate(test), seed)
    logger.debug("split with seed %d: %d train, %d test pixels",
                 seed, len(split.train), len(split.test))
    return split


def save_split_csv(filename, split):
    directory = os.path.abspath(os.path.dirname(filename))
    with tempfile.NamedTemporaryFile("w", dir=directory, delete=False,
                                     encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["row", "col", "class", "role"])
        for entry in split.entries():
            writer.writerow(entry)
        tmpname = f.name
    os.replace(tmpname, filename)


def load_split_csv(filename, seed=None):
    train, test = [], []
    with open(filename, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["row", "col", "class", "role"]:
            raise ValueError("{}: bad split header {!r}"
                             .format(filename, header))
        for lineno, record in enumerate(reader, start=2):
            if len(record) != 4:
                raise ValueError("{}:{}: expected 4 fields, got {}"
                                 .format(filename, lineno, len(record)))
            row, col, cls, role = record
            entry = (int(row), int(col), int(cls))
            if role == TRAIN:
                train.append(entry)
            elif role == TEST:
                test.append(entry)
            else:
                raise ValueError("{}:{}: unknown role {!r}"
                                 .format(filename, lineno, role))
    return SplitSpec(train, test, seed)


def _class_columns(classes, width):
    if width < classes:
        raise ValueError("image width {} cannot hold {} class blocks"
                         .format(width, classes))
    return 1 + (numpy.arange(width)*classes)//width


def _smooth_curves(rng, count, length, harmonics=3):
    t = numpy.linspace(0.0, 1.0, length)
    curves = numpy.zeros((count, length))
    for f in range(1, harmonics + 1):
        amp = rng.uniform(0.0, 1.0/f, size=(count, 1))
        phase = rng.uniform(0.0, 2*numpy.pi, size=(count, 1))
        curves += amp*numpy.sin(2*numpy.pi*f*t + phase)
    lo = curves.min(axis=1, keepdims=True)
    hi = curves.max(axis=1, keepdims=True)
    return 0.2 + 0.6*(curves - lo)/numpy.maximum(hi - lo, 1e-12)


def synth_hsi(classes, bands, height, width, redundancy=4, seed=0,
              noise=0.05):
    """Synthetic cube with redundant adjacent bands.

    Each class has a smooth mean spectrum. Bands come in groups of
    ``redundancy`` that repeat the group's first (anchor) band plus a small
    per-band perturbation, so bands correlate strongly inside a group.
    Pixels are the class mean plus Gaussian noise of deviation ``noise``;
    classes occupy contiguous column blocks. Returns ``(cube, gt)``.
    """
    if classes < 2 or bands < classes:
        raise ValueError("need classes >= 2 and bands >= classes, got "
                         "classes={}, bands={}".format(classes, bands))
    if redundancy < 1:
        raise ValueError("redundancy must be positive")
    rng = numpy.random.default_rng(seed)
    labels = numpy.broadcast_to(_class_columns(classes, width),
                                (height, width)).copy()
    anchors = (numpy.arange(bands)//redundancy)*redundancy
    means = _smooth_curves(rng, classes, bands)[:, anchors]

    anchor_noise = rng.normal(0.0, noise, size=(height, width, bands))
    band_noise = rng.normal(0.0, 0.1*noise, size=(height, width, bands))
    values = means[labels - 1] + anchor_noise[:, :, anchors] + band_noise
    logger.debug("synthetic cube %dx%dx%d, %d classes, redundancy %d",
                 height, width, bands, classes, redundancy)
    return HsiCube(values), GroundTruth(labels)


def synth_spatial(classes, bands, height, width, seed=0, noise=0.05,
                  period=4.0):
    """Synthetic cube whose classes differ by spatial texture.

    Class c is an oriented cosine grating (angle ``c*pi/C``) scaled per
    band, so a single band matrix around a pixel identifies its class while
    the spectra of all classes share the same mean. Classes occupy
    contiguous column blocks. Returns ``(cube, gt)``.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes, got {}".format(classes))
    rng = numpy.random.default_rng(seed)
    labels = numpy.broadcast_to(_class_columns(classes, width),
                                (height, width)).copy()
    gains = rng.uniform(0.5, 1.0, size=bands)
    ii, jj = numpy.meshgrid(numpy.arange(height), numpy.arange(width),
                            indexing="ij")
    angles = (labels - 1)*numpy.pi/classes
    phase = 2*numpy.pi*(ii*numpy.cos(angles) + jj*numpy.sin(angles))/period
    texture = numpy.cos(phase)
    values = (0.5 + 0.4*texture[:, :, numpy.newaxis]*gains
              + rng.normal(0.0, noise, size=(height, width, bands)))
    return HsiCube(values), GroundTruth(labels)

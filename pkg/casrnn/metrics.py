"""Confusion matrices, accuracy summaries and classification maps."""

from collections import namedtuple
import colorsys
import logging
import os

import numpy

from casrnn.data import store_bytes


logger = logging.getLogger(__name__)


class ConfusionMatrix:
    """``counts[i][j]``: test pixels of class ``i+1`` predicted as ``j+1``."""
    def __init__(self, classes):
        if classes < 1:
            raise ValueError("need at least one class")
        self.classes = classes
        self.counts = numpy.zeros((classes, classes), dtype=numpy.int64)

    def _check(self, values):
        values = numpy.asarray(values)
        if numpy.any(values < 1) or numpy.any(values > self.classes):
            raise ValueError("class out of range [1, {}]: {}"
                             .format(self.classes, values))
        return values - 1

    def accumulate(self, true_class, predicted_class):
        """Counts one pixel; classes are 1-based."""
        t = self._check(true_class)
        p = self._check(predicted_class)
        self.counts[t, p] += 1

    def accumulate_many(self, true_classes, predicted_classes):
        t = self._check(true_classes)
        p = self._check(predicted_classes)
        if t.shape != p.shape:
            raise ValueError("{} true classes but {} predictions"
                             .format(t.size, p.size))
        numpy.add.at(self.counts, (t, p), 1)

    def merge(self, other):
        if other.classes != self.classes:
            raise ValueError("cannot merge {}-class and {}-class matrices"
                             .format(self.classes, other.classes))
        self.counts += other.counts

    @property
    def total(self):
        return int(self.counts.sum())


Summary = namedtuple("Summary", "oa aa per_class kappa")


def summarize(cm):
    """OA, AA, per-class accuracies and Cohen's kappa.

    Classes without test pixels have accuracy ``None`` and are left out of
    AA. When chance agreement is 1 (a single populated cell) kappa is 1 for
    perfect agreement and 0 otherwise.
    """
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    counts = cm.counts.astype(numpy.float64)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    diag = numpy.diag(counts)
    oa = diag.sum()/total
    per_class = [None if rows[i] == 0 else diag[i]/rows[i]
                 for i in range(cm.classes)]
    defined = [a for a in per_class if a is not None]
    if len(defined) < cm.classes:
        logger.warning("%d class(es) have no test pixels and are left out "
                       "of AA", cm.classes - len(defined))
    aa = float(numpy.mean(defined))
    p_e = float(numpy.dot(rows, cols))/(total*total)
    if p_e == 1.0:
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = (oa - p_e)/(1.0 - p_e)
    return Summary(float(oa), aa, per_class, float(kappa))


def format_report(summary, title=None):
    lines = []
    if title is not None:
        lines.append(title)
    lines.append("OA    {:.4f}".format(summary.oa))
    lines.append("AA    {:.4f}".format(summary.aa))
    lines.append("Kappa {:.4f}".format(summary.kappa))
    for i, acc in enumerate(summary.per_class, start=1):
        if acc is None:
            lines.append("class {:>3} -".format(i))
        else:
            lines.append("class {:>3} {:.4f}".format(i, acc))
    return "\n".join(lines) + "\n"


def format_key_values(summary):
    lines = ["oa={:.4f}".format(summary.oa),
             "aa={:.4f}".format(summary.aa),
             "kappa={:.4f}".format(summary.kappa)]
    for i, acc in enumerate(summary.per_class, start=1):
        if acc is not None:
            lines.append("class.{}={:.4f}".format(i, acc))
    return "\n".join(lines) + "\n"


def write_report(directory, summary, stem="metrics"):
    """Writes ``<stem>.txt`` (table) and ``<stem>.kv`` (key-value)."""
    for suffix, text in ((".txt", format_report(summary)),
                         (".kv", format_key_values(summary))):
        store_bytes(os.path.join(directory, stem + suffix),
                    text.encode("utf-8"))


def default_palette(classes):
    """``classes + 1`` RGB colors; entry 0 (unlabeled) is black."""
    palette = numpy.zeros((classes + 1, 3), dtype=numpy.uint8)
    for c in range(1, classes + 1):
        # evenly spaced hues, alternating brightness for neighbours
        value = 1.0 if c % 2 else 0.7
        rgb = colorsys.hsv_to_rgb((c - 1)/classes, 1.0, value)
        palette[c] = [int(round(255*v)) for v in rgb]
    return palette


def render_map(filename, predictions, palette):
    """Writes an ``m×n`` class map (0 = unlabeled) as a binary PPM image."""
    predictions = numpy.asarray(predictions, dtype=numpy.int64)
    palette = numpy.asarray(palette, dtype=numpy.uint8)
    if predictions.ndim != 2:
        raise ValueError("class map must be 2-D, got shape {}"
                         .format(predictions.shape))
    if predictions.size and (predictions.min() < 0
                             or predictions.max() >= len(palette)):
        raise ValueError("palette of {} colors does not cover classes 0..{}"
                         .format(len(palette), predictions.max()))
    m, n = predictions.shape
    header = "P6\n{} {}\n255\n".format(n, m).encode("ascii")
    store_bytes(filename, header + palette[predictions].tobytes())


def read_ppm(filename):
    """Reads a binary PPM written by :func:`render_map` into ``(m, n, 3)``."""
    with open(filename, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ValueError("truncated PPM header")
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError("not an 8-bit P6 image")
    n, m = int(fields[1]), int(fields[2])
    pixels = numpy.frombuffer(data[pos:pos + m*n*3], dtype=numpy.uint8)
    return pixels.reshape(m, n, 3)

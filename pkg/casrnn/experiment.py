"""End-to-end pipeline steps shared by the command-line tool."""

from collections import OrderedDict
import csv
import itertools
import logging
import os
import tempfile
import time

import numpy

from casrnn import checkpoint, data
from casrnn.cascade import (Variant, CascadeConfig, CascadeModel,
                            train_cascade, predict_batch, spectral_samples,
                            count_parameters)
from casrnn.config import PRESETS, ConfigError
from casrnn.metrics import (ConfusionMatrix, summarize, render_map,
                            default_palette)
from casrnn.nn import StateError, SgdConfig
from casrnn.spatial import (SpatialConfig, SsCascadeModel, StageSchedule,
                            train_sscas, extract_patches, predict_sscas)


logger = logging.getLogger(__name__)


CUBE_FILE = "cube.hsc"
LABELS_FILE = "labels.hsl"
SPLIT_FILE = "split.csv"
MODEL_FILE = "model.crnw"
LOG_FILE = "train_log.csv"
CONFIG_FILE = "config.txt"
MAP_FILE = "map.ppm"
SWEEP_FILE = "sweep.csv"


class Dataset:
    """Normalized cube, ground truth and split of one run."""
    def __init__(self, cube, gt, split):
        self.cube = cube
        self.gt = gt
        self.split = split

    @property
    def classes(self):
        return self.gt.classes

    @property
    def bands(self):
        return self.cube.k


def synthesize(cfg):
    """Synthetic ``(cube, gt)`` described by the ``synth_*`` fields."""
    if cfg.synth_kind == "spatial":
        return data.synth_spatial(cfg.synth_classes, cfg.synth_bands,
                                  cfg.synth_height, cfg.synth_width,
                                  cfg.synth_seed, cfg.synth_noise)
    return data.synth_hsi(cfg.synth_classes, cfg.synth_bands,
                          cfg.synth_height, cfg.synth_width,
                          cfg.synth_redundancy, cfg.synth_seed,
                          cfg.synth_noise)


def train_counts(cfg, classes):
    if cfg.train_counts is not None:
        if len(cfg.train_counts) != classes:
            raise ConfigError("train_counts", "{} counts for {} classes"
                              .format(len(cfg.train_counts), classes))
        return list(cfg.train_counts)
    return [cfg.train_per_class]*classes


def load_dataset(cfg):
    """Reads or synthesizes the data of ``cfg`` and normalizes it.

    Without a split file, the split is drawn from the training counts with
    ``cfg.seed``.
    """
    if cfg.cube is not None:
        cube = data.load_cube(cfg.cube)
        gt = data.load_labels(cfg.labels)
    else:
        cube, gt = synthesize(cfg)
    gt.check_matches(cube)
    if cfg.preset is not None:
        p = PRESETS[cfg.preset]
        if (cube.k, gt.classes) != (p["bands"], p["classes"]):
            logger.warning("preset %s expects %d bands and %d classes, the "
                           "data has %d and %d", cfg.preset, p["bands"],
                           p["classes"], cube.k, gt.classes)
    if cfg.split is not None:
        split = data.load_split_csv(cfg.split)
        split.validate(gt)
    else:
        split = data.build_split(gt, train_counts(cfg, gt.classes), cfg.seed)
    if cfg.normalize == "full":
        cube = data.normalize(cube)
    elif cfg.normalize == "train":
        cube = data.normalize(cube, split.train_mask(gt.labels.shape))
    logger.info("dataset: %dx%dx%d, %d classes, %d train / %d test pixels",
                cube.m, cube.n, cube.k, gt.classes, len(split.train),
                len(split.test))
    return Dataset(cube, gt, split)


def build_model(cfg, classes, bands):
    rng = numpy.random.default_rng(cfg.seed)
    if cfg.variant == "sscas":
        spatial_cfg = SpatialConfig(cfg.patch, cfg.conv_specs,
                                    cfg.conv_activation)
        cascade_cfg = CascadeConfig(bands, cfg.l, cfg.hidden1, cfg.hidden2,
                                    classes, Variant.base,
                                    spatial_cfg.feature_dim)
        return SsCascadeModel(spatial_cfg, cascade_cfg, rng)
    cascade_cfg = CascadeConfig(bands, cfg.l, cfg.hidden1, cfg.hidden2,
                                classes, Variant(cfg.variant))
    return CascadeModel(cascade_cfg, rng,
                        learn_output_weights=cfg.learn_output_weights)


def model_inputs(model, cube, pixels):
    """Samples for ``(row, col, ...)`` pixels in the model's input form."""
    pixels = numpy.asarray(pixels, dtype=numpy.int64).reshape(len(pixels), -1)
    if isinstance(model, SsCascadeModel):
        return extract_patches(cube, pixels, model.spatial_cfg.patch_size)
    return spectral_samples(cube.values[pixels[:, 0], pixels[:, 1]])


def predict_pixels(model, cube, pixels, batch_size=256):
    """1-based predicted classes of ``pixels``, in chunks."""
    pixels = numpy.asarray(pixels, dtype=numpy.int64).reshape(len(pixels), -1)
    out = numpy.zeros(len(pixels), dtype=numpy.int64)
    for start in range(0, len(pixels), batch_size):
        chunk = pixels[start:start + batch_size]
        x = model_inputs(model, cube, chunk)
        if isinstance(model, SsCascadeModel):
            pred = predict_sscas(model, x, batch_size)
        else:
            pred = predict_batch(model, x, batch_size)
        out[start:start + len(chunk)] = pred + 1
    return out


def sgd_config(cfg):
    return SgdConfig(cfg.lr, cfg.batch, cfg.epochs, cfg.seed)


def train_model(cfg, dataset):
    """Builds and trains the model of ``cfg``; returns ``(model, log)``."""
    model = build_model(cfg, dataset.classes, dataset.bands)
    train = dataset.split.train
    x = model_inputs(model, dataset.cube, train)
    labels = train[:, 2] - 1
    if isinstance(model, SsCascadeModel):
        logger.info("training sscas: %d parameters",
                    sum(p.value.size for p in model.params()))
        schedule = StageSchedule(cfg.stage_a, cfg.stage_b, cfg.stage_c)
        log = train_sscas(model, sgd_config(cfg), schedule, x, labels)
    else:
        logger.info("training %s: %d parameters", cfg.variant,
                    count_parameters(model))
        log = train_cascade(model, sgd_config(cfg), x, labels)
    return model, log


def evaluate(model, dataset):
    """Confusion matrix of the test pixels."""
    test = dataset.split.test
    cm = ConfusionMatrix(dataset.classes)
    if len(test):
        cm.accumulate_many(test[:, 2], predict_pixels(model, dataset.cube,
                                                      test))
    return cm


def predict_map(model, cube, gt=None):
    """``m×n`` map of predicted classes; pixels unlabeled in ``gt`` are 0."""
    rows, cols = numpy.meshgrid(numpy.arange(cube.m), numpy.arange(cube.n),
                                indexing="ij")
    pixels = numpy.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)
    classes = predict_pixels(model, cube, pixels).reshape(cube.m, cube.n)
    if gt is not None:
        classes[gt.labels == 0] = 0
    return classes


def write_map(filename, model, cube, gt=None):
    classes = predict_map(model, cube, gt)
    render_map(filename, classes, default_palette(model_classes(model)))


def model_classes(model):
    if isinstance(model, SsCascadeModel):
        return model.cascade.cfg.classes
    return model.cfg.classes


def save_model(filename, model):
    tensors = OrderedDict()
    tensors["meta.spatial"] = numpy.float64(
        isinstance(model, SsCascadeModel))
    tensors.update(model.state())
    checkpoint.store_file(filename, tensors)


def load_model(filename):
    tensors = checkpoint.load_file(filename)
    if "meta.spatial" not in tensors:
        raise StateError("{} is not a model checkpoint".format(filename))
    if tensors["meta.spatial"]:
        return SsCascadeModel.from_state(tensors)
    return CascadeModel.from_state(tensors)


def run_sweep(cfg, dataset, grid_l, grid_hidden1, grid_hidden2):
    """Trains and evaluates one model per grid point.

    Returns rows of ``(l, hidden1, hidden2, oa, aa, kappa, seconds)``.
    """
    rows = []
    for l, h1, h2 in itertools.product(grid_l, grid_hidden1, grid_hidden2):
        point = _replace(cfg, l=l, hidden1=h1, hidden2=h2)
        start = time.monotonic()
        model, _ = train_model(point, dataset)
        summary = summarize(evaluate(model, dataset))
        seconds = time.monotonic() - start
        logger.info("sweep l=%d hidden1=%d hidden2=%d: OA %.4f",
                    l, h1, h2, summary.oa)
        rows.append((l, h1, h2, summary.oa, summary.aa, summary.kappa,
                     seconds))
    return rows


def _replace(cfg, **changes):
    values = cfg.values()
    values.update(changes)
    return type(cfg).build(values)


def save_sweep_csv(filename, rows):
    directory = os.path.abspath(os.path.dirname(filename))
    with tempfile.NamedTemporaryFile("w", dir=directory, delete=False,
                                     encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["l", "hidden1", "hidden2", "oa", "aa", "kappa",
                         "seconds"])
        for l, h1, h2, oa, aa, kappa, seconds in rows:
            writer.writerow([l, h1, h2, "{:.4f}".format(oa),
                             "{:.4f}".format(aa), "{:.4f}".format(kappa),
                             "{:.3f}".format(seconds)])
        tmpname = f.name
    os.replace(tmpname, filename)

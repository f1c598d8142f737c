#!/usr/bin/env python3

import argparse
import logging
import os
import sys

from casrnn import config, data, experiment
from casrnn.cascade import save_training_log
from casrnn.common_args import (verbosity_args, init_logger_from_args,
                                run_config_args, overrides_from_args)
from casrnn.logging_tools import log_to_file, remove_handler
from casrnn.metrics import summarize, format_report, write_report


logger = logging.getLogger(__name__)


def int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            "expected comma-separated integers, got {!r}".format(text))
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(
            "expected positive integers, got {!r}".format(text))
    return values


def get_argparser():
    parser = argparse.ArgumentParser(
        description="Cascaded RNN hyperspectral classifier")
    verbosity_args(parser)
    subparsers = parser.add_subparsers(dest="action")
    subparsers.required = True

    parser_synth = subparsers.add_parser(
        "synth", help="write a synthetic cube, labels and split")
    parser_train = subparsers.add_parser(
        "train", help="train a model and write its checkpoint")
    parser_eval = subparsers.add_parser(
        "eval", help="evaluate a checkpoint on the test pixels")
    parser_map = subparsers.add_parser(
        "map", help="render the classification map of a checkpoint")
    parser_sweep = subparsers.add_parser(
        "sweep", help="train and evaluate over a hyperparameter grid")
    for p in (parser_synth, parser_train, parser_eval, parser_map,
              parser_sweep):
        run_config_args(p, config.FIELDS)
    for p in (parser_eval, parser_map):
        p.add_argument("--model", default=None, metavar="FILE",
                       help="checkpoint (default: <output_dir>/{})"
                            .format(experiment.MODEL_FILE))
    parser_map.add_argument("--mask-unlabeled", default=False,
                            action="store_true",
                            help="paint pixels without ground truth black")
    parser_sweep.add_argument("--grid-l", type=int_list,
                              default=list(range(2, 21, 2)),
                              help="comma-separated sub-sequence counts")
    for name in ("hidden1", "hidden2"):
        parser_sweep.add_argument("--grid-" + name, type=int_list,
                                  default=[16, 32, 64, 128, 256, 384],
                                  help="comma-separated {} sizes"
                                       .format(name))
    return parser


def config_from_args(args):
    overrides = overrides_from_args(args, config.FIELDS)
    if args.preset is not None:
        overrides["preset"] = args.preset
    if args.config is not None:
        return config.load_file(args.config, overrides)
    return config.parse("", overrides)


def output_path(cfg, name):
    return os.path.join(cfg.output_dir, name)


def cmd_synth(cfg):
    cube, gt = experiment.synthesize(cfg)
    split = data.build_split(gt, experiment.train_counts(cfg, gt.classes),
                             cfg.seed)
    data.save_cube(output_path(cfg, experiment.CUBE_FILE), cube)
    data.save_labels(output_path(cfg, experiment.LABELS_FILE), gt)
    data.save_split_csv(output_path(cfg, experiment.SPLIT_FILE), split)
    logger.info("wrote %dx%dx%d cube with %d classes to %s",
                cube.m, cube.n, cube.k, gt.classes, cfg.output_dir)


def cmd_train(cfg):
    handler = log_to_file(output_path(cfg, "train.log"))
    try:
        dataset = experiment.load_dataset(cfg)
        if cfg.split is None:
            data.save_split_csv(output_path(cfg, experiment.SPLIT_FILE),
                                dataset.split)
        model, log = experiment.train_model(cfg, dataset)
        experiment.save_model(output_path(cfg, experiment.MODEL_FILE), model)
        save_training_log(output_path(cfg, experiment.LOG_FILE), log)
        data.store_bytes(output_path(cfg, experiment.CONFIG_FILE),
                         config.serialize(cfg).encode("utf-8"))
        logger.info("training done, artifacts in %s", cfg.output_dir)
    finally:
        remove_handler(handler)


def model_path(cfg, args):
    if args.model is not None:
        return args.model
    return output_path(cfg, experiment.MODEL_FILE)


def cmd_eval(cfg, args):
    model = experiment.load_model(model_path(cfg, args))
    dataset = experiment.load_dataset(cfg)
    summary = summarize(experiment.evaluate(model, dataset))
    write_report(cfg.output_dir, summary)
    print(format_report(summary), end="")


def cmd_map(cfg, args):
    model = experiment.load_model(model_path(cfg, args))
    dataset = experiment.load_dataset(cfg)
    experiment.write_map(output_path(cfg, experiment.MAP_FILE), model,
                         dataset.cube,
                         dataset.gt if args.mask_unlabeled else None)


def cmd_sweep(cfg, args):
    dataset = experiment.load_dataset(cfg)
    rows = experiment.run_sweep(cfg, dataset, args.grid_l, args.grid_hidden1,
                                args.grid_hidden2)
    experiment.save_sweep_csv(output_path(cfg, experiment.SWEEP_FILE), rows)


def main(argv=None):
    args = get_argparser().parse_args(argv)
    init_logger_from_args(args)
    try:
        cfg = config_from_args(args)
        os.makedirs(cfg.output_dir, exist_ok=True)
        if args.action == "synth":
            cmd_synth(cfg)
        elif args.action == "train":
            cmd_train(cfg)
        elif args.action == "eval":
            cmd_eval(cfg, args)
        elif args.action == "map":
            cmd_map(cfg, args)
        elif args.action == "sweep":
            cmd_sweep(cfg, args)
    except config.ConfigError as e:
        print("configuration error: {}".format(e), file=sys.stderr)
        return 2
    except Exception:
        logger.error("%s failed", args.action, exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

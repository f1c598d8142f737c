import logging

from casrnn.logging_tools import multiline_log_config


def verbosity_args(parser):
    """
    Adds `-v`/`-q` arguments that increase or decrease the default logging levels.
    Repeat for higher levels.
    """
    group = parser.add_argument_group("verbosity")
    group.add_argument("-v", "--verbose", default=0, action="count",
                       help="increase logging level")
    group.add_argument("-q", "--quiet", default=0, action="count",
                       help="decrease logging level")


def init_logger_from_args(args):
    multiline_log_config(
        level=logging.WARNING + args.quiet*10 - args.verbose*10)


def run_config_args(parser, fields):
    """Adds one ``--<name>`` flag per configuration field.

    Flags default to ``None`` so that only values given on the command line
    override the configuration file. Values are kept as strings and decoded
    by :func:`casrnn.config.decode_value`.
    """
    group = parser.add_argument_group("run configuration")
    group.add_argument("--config", default=None, metavar="FILE",
                       help="key = value configuration file")
    group.add_argument("--preset", default=None,
                       help="dataset preset applied before the file "
                            "(indian-pines, pavia-university)")
    for name, _, default, doc in fields:
        if name == "preset":
            continue
        group.add_argument("--" + name.replace("_", "-"), dest=name,
                           default=None, metavar="VALUE",
                           help="{} (default: {!r})".format(doc, default))


def overrides_from_args(args, fields):
    """Returns the ``{name: raw string}`` flags given on the command line."""
    overrides = dict()
    for name, _, _, _ in fields:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return overrides

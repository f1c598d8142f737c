import logging


TRACE = 5
logging.TRACE = TRACE
logging.addLevelName(TRACE, "TRACE")


logger = logging.getLogger(__name__)


class MultilineFormatter(logging.Formatter):
    """Formats records as ``LEVEL:name:message``.

    Records spanning several lines (metrics tables, tracebacks) get a
    ``<n>`` marker after the level so that log files stay line-parseable.
    """
    def __init__(self):
        logging.Formatter.__init__(
            self, "%(levelname)s:%(name)s:%(message)s")

    def format(self, record):
        r = logging.Formatter.format(self, record)
        linebreaks = r.count("\n")
        if linebreaks:
            i = r.index(":")
            r = r[:i] + "<" + str(linebreaks + 1) + ">" + r[i:]
        return r


def multiline_log_config(level):
    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    handler = logging.StreamHandler()
    handler.setLevel(level)
    handler.setFormatter(MultilineFormatter())
    root_logger.addHandler(handler)


def log_to_file(filename, level=logging.INFO):
    """Mirrors all records at ``level`` or above into ``filename``.

    Returns the handler; pass it to :func:`remove_handler` when the run is
    over. The root logger is lowered to ``level`` while the file is open
    and restored on removal; console handlers keep their own levels.
    """
    root_logger = logging.getLogger()
    handler = logging.FileHandler(filename, mode="w", encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(MultilineFormatter())
    root_logger.addHandler(handler)
    handler.previous_root_level = root_logger.level
    if root_logger.level > level:
        root_logger.setLevel(level)
    logger.debug("mirroring log records to %s", filename)
    return handler


def remove_handler(handler):
    root_logger = logging.getLogger()
    root_logger.removeHandler(handler)
    handler.close()
    previous = getattr(handler, "previous_root_level", None)
    if previous is not None:
        root_logger.setLevel(previous)

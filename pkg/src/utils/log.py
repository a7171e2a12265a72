import logging
import sys

_ROOT = "spatial_gee"
_FORMAT = "[%(component)s] %(message)s"


class _ComponentFilter(logging.Filter):
    """Exposes the last dotted segment of the logger name as %(component)s."""

    def filter(self, record):
        record.component = record.name.rsplit(".", 1)[-1]
        return True


def configure_logging(level=logging.INFO, stream=None):
    """
    Installs the console handler on the package root logger.
    Safe to call repeatedly; the handler is replaced, not duplicated.
    """
    root = logging.getLogger(_ROOT)
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(stream if stream is not None else sys.stderr)
    handler.setFormatter(logging.Formatter(_FORMAT))
    handler.addFilter(_ComponentFilter())
    root.addHandler(handler)
    root.setLevel(level)
    return root


def get_logger(component: str) -> logging.Logger:
    """Returns the logger for one component, e.g. get_logger('PooledQMLE')."""
    logger = logging.getLogger(f"{_ROOT}.{component}")
    return logger

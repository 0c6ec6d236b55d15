"""
Logging helpers.

All modules log through `get_logger`; the CLI calls `configure` once. Records are
printed as `[INFO] message`.
"""

import logging
import sys

LOG_FORMAT = "[%(levelname)s] %(message)s"
ROOT_LOGGER = "qra"


def get_logger(name):
    """
    Returns a logger under the package namespace.

    Parameters:
        name (str): Usually `__name__` of the calling module.

    Returns:
        logging.Logger: The logger.
    """
    if not name.startswith(ROOT_LOGGER):
        name = f"{ROOT_LOGGER}.{name}"
    return logging.getLogger(name)


def configure(verbose=False, quiet=False, stream=None):
    """
    Installs a single stream handler on the package logger.

    Parameters:
        verbose (bool): DEBUG when True, INFO otherwise.
        quiet (bool): Only warnings and errors.
        stream: Where records go. Defaults to the current stderr so stdout stays
            for tables.
    """
    logger = logging.getLogger(ROOT_LOGGER)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    if quiet:
        logger.setLevel(logging.WARNING)
    else:
        logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False

import logging
import os
import sys
from typing import Optional

LOG_LEVEL_ENV = "MPSIM_LOG_LEVEL"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> int:
    """
    Install a single stderr handler on the root logger.

    Args:
        level: Level name; when omitted the ``MPSIM_LOG_LEVEL`` environment
            variable is used, defaulting to WARNING.

    Returns:
        The numeric level that was applied.
    """
    requested = (level or os.environ.get(LOG_LEVEL_ENV) or "WARNING").upper()
    numeric = logging.getLevelName(requested)
    invalid = not isinstance(numeric, int)
    if invalid:
        numeric = logging.WARNING

    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(numeric)

    if invalid:
        logging.getLogger(__name__).warning(
            "Unknown log level %r in %s, using WARNING", requested, LOG_LEVEL_ENV
        )
    return numeric

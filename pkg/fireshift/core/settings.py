import logging
import os

from dotenv import load_dotenv

# LOAD ENV VARS FIRST
load_dotenv()

logger = logging.getLogger("Settings")


def _threads_from_env() -> int:
    raw = os.getenv("FIRE_THREADS")
    if not raw:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"⚠️ FIRE_THREADS={raw!r} is not an integer, using 1 worker")
        return 1
    return max(value, 1)


FIRE_THREADS = _threads_from_env()
FIRE_LOG_LEVEL = os.getenv("FIRE_LOG_LEVEL", "INFO").upper()


def worker_count(requested: int | None = None) -> int:
    """Workers for a pool: the request, capped by FIRE_THREADS."""
    if requested is None:
        return FIRE_THREADS
    return max(1, min(requested, FIRE_THREADS))

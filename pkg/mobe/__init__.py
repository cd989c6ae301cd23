import logging
import os
import sys
from dataclasses import dataclass

from dotenv import load_dotenv

__version__ = "0.3.0"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass(frozen=True)
class Settings:
    """Process-wide defaults resolved from the environment (and an optional .env file)."""
    jobs: int
    log_level: str
    steps: int
    deterministic: bool


def _env_flag(name, default=False):
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


def load_settings():
    # Load environment variables from .env file
    load_dotenv()

    deterministic = _env_flag("MOBE_DETERMINISTIC")
    jobs = int(os.getenv("MOBE_JOBS", os.cpu_count() or 1))
    if deterministic:
        jobs = 1

    return Settings(
        jobs=max(1, jobs),
        log_level=os.getenv("MOBE_LOG_LEVEL", "INFO").upper(),
        steps=int(os.getenv("MOBE_STEPS", 5000)),
        deterministic=deterministic,
    )


def configure_logging(level="INFO"):
    """Send toolkit logs to stderr; stdout stays reserved for summaries."""
    root = logging.getLogger("mobe")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
    return root

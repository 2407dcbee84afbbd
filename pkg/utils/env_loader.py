"""Environment variable loader using python-dotenv."""
import os
from typing import Optional

from dotenv import load_dotenv

from utils.errors import ConfigError

# Load environment variables from .env file
load_dotenv()


def get_env(key: str, default: Optional[str] = None) -> str:
    """Get environment variable value."""
    value = os.getenv(key, default)
    if value is None:
        raise ConfigError(f"Environment variable {key} is not set")
    return value


def get_log_level() -> str:
    """Get logging level name from environment."""
    return get_env("VALLEYS_LOG_LEVEL", "INFO").upper()


def get_default_workers() -> int:
    """Get default worker count from environment."""
    raw = get_env("VALLEYS_WORKERS", "1")
    try:
        workers = int(raw)
    except ValueError as exc:
        raise ConfigError(f"VALLEYS_WORKERS must be an integer, got {raw!r}") from exc
    if workers < 1:
        raise ConfigError(f"VALLEYS_WORKERS must be >= 1, got {workers}")
    return workers


def get_default_out_dir() -> str:
    """Get default output directory from environment."""
    return get_env("VALLEYS_OUT_DIR", "runs")

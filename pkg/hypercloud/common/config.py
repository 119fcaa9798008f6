"""Runtime settings read from the environment."""

import os
from dataclasses import dataclass

DEFAULT_DATABASE_URL = "sqlite:///hypercloud_runs.db"


@dataclass(frozen=True)
class Settings:
    seed: int
    threads: int
    database_url: str
    log_level: str


def _int_from_env(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"{name} must be an integer, got {value!r}") from None


def get_settings() -> Settings:
    """Collect settings; command-line flags override every value here."""
    return Settings(
        seed=_int_from_env("HYPERCLOUD_SEED", 0),
        threads=max(1, _int_from_env("HYPERCLOUD_THREADS", os.cpu_count() or 1)),
        database_url=os.getenv("DATABASE_URL", DEFAULT_DATABASE_URL),
        log_level=os.getenv("HYPERCLOUD_LOG_LEVEL", "INFO").upper(),
    )

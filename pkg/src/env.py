"""Environment switches shared by the CLI, the training loops and the quantizer."""

from __future__ import annotations

import os

from .errors import ConfigError

TRUTHY = {"1", "true", "yes", "on"}


def env_flag(name: str, default: bool = False) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in TRUTHY


def env_int(name: str, default: int | None = None) -> int | None:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"environment variable {name} must be an integer, got {raw!r}") from exc


def debug_enabled() -> bool:
    """QKD_DEBUG: per-step training lines and per-layer Δ values."""
    return env_flag("QKD_DEBUG")

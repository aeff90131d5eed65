import enum
import logging
import math
import sys
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel


class error_resp(BaseModel):
    code: int
    details: Optional[str] = None


class api_resp(BaseModel):
    success: bool
    message: str
    data: Optional[Any] = None
    error: Optional[error_resp] = None
    error_type: Optional[str] = None


def configure_logging(level: str = "WARNING") -> None:
    """Send library logs to stderr so stdout stays free for CSV/JSON output."""
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level.upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def to_jsonable(value: Any) -> Any:
    """
    Convert numpy containers and non-finite floats into plain JSON values.
    NaN and infinities become None.
    """
    if isinstance(value, BaseModel):
        return to_jsonable(value.model_dump())
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, enum.Enum):
        return value.value
    return value


# Seeding utilities
def replicate_seed(seed: int, replicate: int) -> int:
    """Seed of replicate r in a scenario run: seed XOR r."""
    return int(seed) ^ int(replicate)


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for stream `stream` under a base seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


# Validation utilities
def validate_seed(seed: int) -> tuple[bool, str]:
    """
    Validate a 64-bit seed.
    Returns (is_valid, error_message)
    """
    if seed is None:
        return False, "Seed is required"

    if seed < 0 or seed >= 2 ** 64:
        return False, "Seed must be an integer in [0, 2^64)"

    return True, ""


def validate_scale(scale: float) -> tuple[bool, str]:
    """
    Validate a scenario scale factor.
    Returns (is_valid, error_message)
    """
    if not (scale > 0):
        return False, "Scale must be positive"

    if scale > 1:
        return False, "Scale must not exceed 1.0 (full study size)"

    return True, ""


def validate_threads(threads: int) -> tuple[bool, str]:
    """
    Validate a worker count.
    Returns (is_valid, error_message)
    """
    if threads < 1:
        return False, "Thread count must be at least 1"

    return True, ""


def validate_columns(available: list[str], required: list[str]) -> tuple[bool, str]:
    """
    Validate that every required column is present.
    Returns (is_valid, error_message)
    """
    missing = [c for c in required if c not in available]
    if missing:
        return False, f"Missing column(s): {', '.join(missing)}"

    return True, ""


def validate_gamma_linear(text: str) -> tuple[bool, str]:
    """
    Validate a linear gamma specification of the form "g0,g1".
    Returns (is_valid, error_message)
    """
    parts = text.split(",")
    if len(parts) != 2:
        return False, "Linear gamma must be given as g0,g1"

    try:
        g0, g1 = float(parts[0]), float(parts[1])
    except ValueError:
        return False, "Linear gamma endpoints must be numbers"

    if g0 <= 0 or g1 <= 0:
        return False, "Linear gamma endpoints must be positive"

    return True, ""

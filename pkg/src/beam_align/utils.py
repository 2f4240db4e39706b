"""Utility & helper functions."""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np

# Purpose codes keep substreams for different concerns disjoint.
STREAM_PURPOSES = {
    "paths": 0,
    "noise": 1,
    "noise_level": 2,
    "split": 3,
    "init": 4,
    "shuffle": 5,
    "lsh": 6,
    "eval_noise": 7,
}


def substream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Return a counter-based generator keyed by (seed, purpose, keys).

    Args:
        seed: The global run seed.
        purpose: One of ``STREAM_PURPOSES``.
        keys: Extra integer keys, typically a UE id or an epoch index.
    """
    code = STREAM_PURPOSES[purpose]
    entropy = [int(seed) & 0xFFFFFFFF, code, *(int(k) & 0xFFFFFFFF for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def dbm_to_watt(dbm: float | np.ndarray) -> float | np.ndarray:
    """Convert dBm to linear watts."""
    return 10.0 ** ((np.asarray(dbm, dtype=np.float64) - 30.0) / 10.0)


def watt_to_dbm(watt: float | np.ndarray, floor: float = 1e-30) -> float | np.ndarray:
    """Convert linear watts to dBm, clipping at ``floor`` watts."""
    return 10.0 * np.log10(np.maximum(np.asarray(watt, dtype=np.float64), floor)) + 30.0


def db(x: float | np.ndarray) -> float | np.ndarray:
    """Convert a linear power ratio to dB."""
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(x, dtype=np.float64))


def canonical_json(value: Any) -> str:
    """Serialize ``value`` deterministically (sorted keys, no whitespace)."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), default=_json_default)


def stable_hash(value: Any) -> str:
    """Return the hex SHA-256 of the canonical JSON form of ``value``."""
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_builtin(value: Any) -> Any:
    """Recursively convert numpy scalars/arrays into JSON-friendly builtins."""
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        f = float(value)
        return None if not np.isfinite(f) else f
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value

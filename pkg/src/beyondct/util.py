"""Small shared helpers: deterministic rounding, hashing, canonical JSON."""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

import numpy as np


def round_half_up(x: float) -> int:
    """Round to nearest integer, ties away from zero toward +inf."""
    return int(math.floor(x + 0.5))


def canonical_json(obj: Any) -> str:
    """Stable JSON encoding: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stable_seed(*parts: object) -> int:
    """64-bit seed from a pipe-joined digest of the parts.

    Uses sha256 rather than hash() so the value survives interpreter
    restarts and PYTHONHASHSEED changes.
    """
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(*parts: object) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))

"""Index sets for width-subset training."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from flft.costmodel import scaled_dim
from flft.errors import ConfigError


def _width(s: float, q: int) -> int:
    if not 0 < s <= 1:
        raise ConfigError(f"scale {s} outside (0, 1]")
    k = scaled_dim(s, q)
    if k < 1:
        raise ConfigError(f"scale {s} keeps no coordinates of a dimension of size {q}")
    return k


def heterofl_index_set(s: float, q: int) -> np.ndarray:
    """Fixed prefix {0, ..., floor(s q) - 1}."""
    return np.arange(_width(s, q))


def fedrolex_index_set(r: int, s: float, q: int) -> np.ndarray:
    """Rolling window of width floor(s q) starting at r mod q, wrapping past the end."""
    k = _width(s, q)
    start = r % q
    if start + k <= q:
        return np.arange(start, start + k)
    return np.concatenate([np.arange(start, q), np.arange(0, start + k - q)])


def fjord_sample_levels(levels: Sequence[float], s_max: float, rng: np.random.Generator) -> float:
    """Uniform draw among the configured levels not above the device's maximum."""
    allowed = sorted(x for x in levels if x <= s_max + 1e-12)
    if not allowed:
        raise ConfigError(f"no level <= {s_max} among {list(levels)}")
    return allowed[int(rng.integers(len(allowed)))]

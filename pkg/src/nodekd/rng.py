"""Named random streams derived from one master seed.

Each pipeline stage draws from its own stream, so changing how much
randomness one stage consumes leaves the others untouched.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for sub-stream ``name`` (e.g. "init", "shuffle", "augment", "attack")."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])

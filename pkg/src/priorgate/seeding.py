"""Root-seed discipline: every random stream derives from (seed, labels...).

Labels are hashed with crc32, so derivations are stable across runs and
platforms and any stage can be replayed independently.
"""

from __future__ import annotations

import zlib

import numpy as np


def derived_rng(*keys) -> np.random.Generator:
    entropy = [k if isinstance(k, (int, np.integer)) else zlib.crc32(str(k).encode()) for k in keys]
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in entropy])

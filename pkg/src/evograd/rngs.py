"""Named deterministic random streams.

Every experiment run derives its generators from ``stream(seed, purpose)``
so that population noise, data generation, initialization and batch
sampling are independent: changing how one purpose consumes randomness
cannot shift another's draws. The generator is numpy's PCG64 seeded by a
``SeedSequence`` over the pair (seed, crc32(purpose)); crc32 keeps the
purpose hashing stable across processes and platforms, unlike Python's
salted ``hash``. Identical (seed, purpose) pairs therefore yield
bit-identical streams anywhere.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one purpose within one seeded run."""
    entropy = (int(seed), zlib.crc32(purpose.encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(entropy))

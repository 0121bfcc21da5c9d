"""Seed-stream helpers: every random consumer gets ``(seed, *keys)``."""

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream ``(seed, *keys)``.

    Streams with different keys are statistically independent and a given
    ``(seed, keys)`` pair always yields the same sequence, no matter how
    many other streams exist or in which order they are consumed.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))

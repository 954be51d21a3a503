"""Seeded random streams.

Every replicate (simulation or bootstrap) draws from PCG64 seeded by a
`numpy.random.SeedSequence` built from ``(seed, replicate)``. The
SeedSequence hashes both into the generator state, so streams are
independent of each other and of the order replicates run in.
"""

import numpy as np


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    if seed < 0 or replicate < 0:
        raise ValueError("seed and replicate index must be nonnegative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(replicate,))))

"""Seeded random streams.

Every stochastic step draws from ``numpy.random.Generator(PCG64(...))``
keyed by ``(seed, stream)``. Streams are fixed small integers so that e.g.
weight initialization and triplet sampling never share state.
"""

import numpy as np

SPLIT = 1
SYNTH = 2
INIT = 3
TRIPLETS = 4
HALF_SPLIT = 5
CALIBRATE = 6


def make_rng(seed, stream=0):
    return np.random.Generator(np.random.PCG64([int(stream), int(seed)]))

"""Counter-based random sources.

Every stochastic routine takes an explicit ``numpy.random.Generator``; this
module only builds them deterministically from integer keys.
"""

import numpy as np


def make_rng(*keys: int) -> np.random.Generator:
    """Philox generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child generators, derived without touching the parent's stream."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]

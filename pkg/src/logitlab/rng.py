"""Named deterministic RNG streams.

Every randomized feature draws from its own stream, keyed by (seed,
purpose), so toggling one feature (say, label noise) never perturbs the
draws of another (say, weight init or shuffling).
"""

from __future__ import annotations

import numpy as np

# Fixed stream ids; append only, never renumber.
_PURPOSES = {
    "init": 1,
    "shuffle": 2,
    "noise": 3,
    "split": 4,
    "superclass_centers": 5,
    "subclass_centers": 6,
    "samples": 7,
    "fuzz": 8,
}


def purpose_rng(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Generator for one (seed, purpose[, index]) stream.

    `index` distinguishes repeated uses of the same purpose, e.g. the
    per-epoch shuffle stream.
    """
    if purpose not in _PURPOSES:
        raise ValueError(f"unknown rng purpose {purpose!r}; known: {sorted(_PURPOSES)}")
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(_PURPOSES[purpose], int(index)))
    )

"""Seed-splitting helpers.

Every random stream in the package is derived from a master seed plus a
small tuple of integer tags, so any component can be re-created in
isolation (resume, parallel workers, replay) without carrying generator
state around.
"""

from __future__ import annotations

import numpy as np

# Fixed stream tags; keep stable, they are part of the on-disk reproducibility
# contract (a checkpointed run must resume onto identical streams).
STREAM_ASK = 1
STREAM_TRAIN = 2
STREAM_EVAL = 3
STREAM_WORLD = 4
STREAM_NOISE = 5
STREAM_INIT = 6


def rng_for(master_seed: int, *path: int) -> np.random.Generator:
    """Return a Generator keyed by (master_seed, *path).

    The same key always yields the same stream; distinct keys yield
    independent streams (np.random.SeedSequence guarantees).
    """
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, path)]))


def agent_seed(master_seed: int, generation: int, index: int) -> int:
    """Scalar training seed for one sampled agent, unique per (gen, index)."""
    ss = np.random.SeedSequence([int(master_seed), int(generation), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])

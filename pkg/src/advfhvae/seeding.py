"""Counter-based seed derivation.

All randomness in the toolkit flows from one root seed. Sub-streams are
derived with ``numpy.random.SeedSequence(root, spawn_key=counters)`` where
each purpose owns a fixed counter, so adding a new consumer never shifts
the streams of existing ones.
"""

from __future__ import annotations

import numpy as np

# Fixed purpose counters. Never renumber; append only.
STREAM_SYNTH = 1
STREAM_SPLIT = 2
STREAM_EPOCH = 3
STREAM_INIT = 4
STREAM_NOISE = 5
STREAM_EVAL = 6
STREAM_PROBE = 7
STREAM_INTENT = 8


def derive_seed(root: int, *counters: int) -> int:
    """A 32-bit seed for the sub-stream identified by ``counters``."""
    ss = np.random.SeedSequence(root, spawn_key=tuple(counters))
    return int(ss.generate_state(1)[0])


def derive_rng(root: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(root, spawn_key=tuple(counters)))

"""Deterministic random-stream derivation.

Every stochastic component draws from a Philox counter-based generator keyed
by (seed, domain tag, indices...).  Streams are therefore independent of call
order and of how work is scheduled, and identical seeds reproduce identical
runs bit-for-bit.
"""

from __future__ import annotations

import numpy as np

# Domain tags; keep values stable, they are part of the reproducibility contract.
MPPI_NOISE = 1
RANDOM_COLLECT = 2
TASK_COLLECT = 3
TRAIN_SHUFFLE = 4
PARAM_INIT = 5


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, *key)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def subseed(seed: int, *key: int) -> int:
    """Derived integer seed for components that key their own substreams."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint32)[0])

"""Hierarchical, counter-based random streams.

Every stream is a ``numpy.random.Generator`` over the Philox-4x64 counter-based
bit generator. Its key comes from ``numpy.random.SeedSequence(master_seed,
spawn_key=path)``, where ``path`` is a tuple of small integers such as
``(PURPOSE, task_index, part)``. A stream therefore depends only on the
master seed and its path. Changing how many numbers one stream consumes never
shifts another stream.
"""

from __future__ import annotations

import numpy as np

# first element of a stream path
TRAIN_TASKS = 0
TEST_TASKS = 1
INIT = 2
DIAGNOSTICS = 3
ONLINE = 4
MISC = 5

# last element of a per-task path
TASK_PARAMS = 0
SUPPORT = 1
QUERY = 2


def stream(master_seed: int, *path: int) -> np.random.Generator:
    if master_seed < 0:
        raise ValueError("seed must be non-negative")
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))

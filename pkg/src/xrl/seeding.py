"""One global seed fanned out into independent per-subsystem streams."""
from __future__ import annotations

import numpy as np

# fixed counters: adding a subsystem never shifts another's stream
STREAMS = {
    "init": 0,
    "shuffle": 1,
    "pgd": 2,
    "zeta": 3,
    "direction": 4,
    "attack": 5,
    "kmeans": 6,
    "eval_pgd": 7,
    "data": 8,
}


def subseed(seed: int, stream: str) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[stream],))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[stream],)))

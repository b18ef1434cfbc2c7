"""Counter-based random streams keyed by seed, purpose and path block."""
from __future__ import annotations

import numpy as np

BLOCK = 1024

_PURPOSES = {
    "chain": 1,
    "brownian": 2,
    "bridge": 3,
    "initial": 4,
    "sample": 5,
    "instances": 6,
    "policies": 7,
}


def stream(seed: int, purpose: str, block: int = 0) -> np.random.Generator:
    """Philox generator for one block of paths.

    Every block draws full-size arrays, so the numbers used by a given path
    depend only on (seed, purpose, path index).
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(_PURPOSES[purpose], int(block)))
    return np.random.Generator(np.random.Philox(ss))


def blocks(n_paths: int, size: int = BLOCK):
    """Yield (block index, start, stop) for a path range."""
    for b, start in enumerate(range(0, n_paths, size)):
        yield b, start, min(start + size, n_paths)

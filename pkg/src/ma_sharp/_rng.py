"""Deterministic stream seeding shared by experiments and the CLI.

Reports promise byte-identical payloads for a fixed seed, so the mapping
from (seed, stream label) to generator state is part of the output
contract and is pinned here: the label is folded into the seed with the
SplitMix64 finalizer (the same mixer numpy uses to spread seed entropy),
and the result seeds a PCG64 generator. Changing this function changes
every seeded report.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_seed(seed: int, label: str = "") -> int:
    """Fold a textual stream label into a 64-bit sub-seed."""
    z = seed & _MASK
    for byte in label.encode("utf-8"):
        z = _splitmix64(z ^ byte)
    return _splitmix64(z)


def generator(seed: int, label: str = "") -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(seed, label)))

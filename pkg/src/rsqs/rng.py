"""Seeded random substreams.

Every consumer of randomness asks for ``substream(master_seed, "component", i, ...)``.
The component name is hashed (crc32) into the seed sequence entropy, so adding a
new component never perturbs the streams of existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def component_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF, component_key(name), *(int(i) & 0xFFFFFFFF for i in index)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))

"""Per-subsystem random streams derived from one global seed."""
from __future__ import annotations

import zlib

import numpy as np


def subsystem_seed(seed: int, label: str) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]).generate_state(1)[0])


def subsystem_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(label.encode())])

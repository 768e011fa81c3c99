"""All randomness flows from one root seed through labeled Philox streams.

``rng_for(seed, *labels)`` derives an independent counter-based generator for
any (seed, label path) pair; the same pair always yields the same stream, and
distinct label paths are statistically independent, so pipeline stages can be
reordered or rerun without perturbing each other's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_int(label) -> int:
    digest = hashlib.sha256(str(label).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, *labels) -> np.random.Generator:
    entropy = [int(seed)] + [_label_int(l) for l in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

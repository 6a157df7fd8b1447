"""Deterministic RNG substreams derived from a single root seed.

Every source of randomness in a run (dataset generation, parameter init,
training batches, entropy sampling, rendering) pulls from its own named
substream so that changing one component's draws never perturbs another's.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Generator for the substream `name` of `root_seed`.

    Stable across processes and platforms (no reliance on Python hash
    randomization): the same (seed, name) pair always yields the same
    stream.
    """
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), _name_key(name)]))

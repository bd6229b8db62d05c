"""Seed derivation and fold partitions.

A master seed expands into independent sub-seeds through numpy's
``SeedSequence`` spawn keys, so a unit of work (replication, fold,
estimator) always sees the same stream regardless of execution order.
"""

from __future__ import annotations

from typing import List

import numpy as np

from .errors import DomainError

SEED_SCHEME = "numpy.SeedSequence(entropy=seed, spawn_key=path)"


def derive_seed(seed: int, *path: int) -> int:
    """Sub-seed for the work unit addressed by ``path`` (a tuple of ints)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def fold_indices(n: int, B: int, seed: int) -> List[np.ndarray]:
    """Shuffle ``0..n-1`` (Fisher-Yates) and cut into B contiguous blocks.

    Block sizes differ by at most one.
    """
    if B < 2:
        raise DomainError("need at least two folds")
    if n < B:
        raise DomainError(f"cannot split {n} rows into {B} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(b) for b in np.array_split(perm, B)]

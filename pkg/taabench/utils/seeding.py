"""
Per-sample seeding.

Every stochastic attack draws from a generator seeded by
hash(master seed, sample index, attack label), so a sample's trajectory
does not depend on which worker thread runs it or in what order.
"""

import hashlib

import numpy as np


def sample_seed(master: int, index: int, attack: str) -> int:
    digest = hashlib.sha256(f"{int(master)}:{int(index)}:{attack}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def sample_rng(master: int, index: int, attack: str) -> np.random.Generator:
    return np.random.default_rng(sample_seed(master, index, attack))


def pick_samples(n_available: int, n_wanted: int, master: int) -> np.ndarray:
    """Sorted test-set indices for a run; the whole test split if n_wanted covers it."""
    if n_wanted >= n_available:
        return np.arange(n_available)
    rng = np.random.default_rng(sample_seed(master, -1, "sample-selection"))
    return np.sort(rng.choice(n_available, size=n_wanted, replace=False))

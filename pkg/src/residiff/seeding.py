"""Deterministic seed derivation.

Every stochastic draw in the toolkit flows from a single master seed.
Child streams are derived by hashing the master seed together with a
purpose tag and indices, so independent workers (per subject, per slice,
per sample) can reproduce any part of the randomness without sharing a
stream or coordinating order of execution.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_SEED_MASK = (1 << 63) - 1


def derive_seed(master_seed: int, *parts) -> int:
    """Derive a child seed from the master seed and a purpose path.

    The same (master_seed, parts) always yields the same child seed;
    distinct paths yield independent-looking seeds.
    """
    token = ":".join([str(int(master_seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _SEED_MASK


def numpy_rng(seed: int) -> np.random.Generator:
    """A fresh numpy generator seeded with `seed`."""
    return np.random.default_rng(int(seed))


def torch_rng(seed: int) -> torch.Generator:
    """A fresh CPU torch generator seeded with `seed`."""
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen

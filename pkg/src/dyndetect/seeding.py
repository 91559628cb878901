"""Root-seed derivation: every pipeline stage draws from its own stream."""

import hashlib

import numpy as np


def derive_seed(root: int, stage: str) -> int:
    """Stable 63-bit seed for ``stage`` under ``root`` (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(f"{int(root)}/{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(root: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stage))

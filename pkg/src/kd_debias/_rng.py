"""Named random streams derived from a single root seed."""
from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for ``(seed, purpose)``.

    Consumers that draw from different purposes never perturb one another,
    so adding a new consumer keeps existing streams bit-identical.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _label_key(purpose)])
    return np.random.Generator(np.random.PCG64(ss))

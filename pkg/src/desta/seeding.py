"""Deterministic seed derivation shared across the pipeline.

All randomness in the package flows through numpy's PCG64 generator, with
per-purpose seeds derived by hashing so that results do not depend on call
order or worker scheduling. SHA-256 keeps the derivation identical across
platforms and Python builds (unlike the builtin hash()).
"""

from __future__ import annotations

import hashlib

import numpy as np

RNG_ALGORITHM = "numpy-pcg64/sha256-derived"


def derive64(*parts) -> int:
    """Stable 64-bit value from an arbitrary tuple of ints/strings."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big")


def make_rng(*parts) -> np.random.Generator:
    """PCG64 generator seeded from derive64(*parts)."""
    return np.random.Generator(np.random.PCG64(derive64(*parts)))

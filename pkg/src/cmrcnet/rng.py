"""Seeded random streams.

All randomness flows through :class:`numpy.random.Generator` instances built
here, so a seed plus a call sequence fixes every draw.  Named sub-streams are
derived by hashing, which keeps e.g. per-sample generation independent of the
order in which samples are produced.
"""

from __future__ import annotations

import hashlib

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & (2**64 - 1))))


def derive_seed(seed: int, *labels: object) -> int:
    h = hashlib.sha256(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x00")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


def substream(seed: int, *labels: object) -> np.random.Generator:
    return make_rng(derive_seed(seed, *labels))

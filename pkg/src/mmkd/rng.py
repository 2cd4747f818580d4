"""Seed derivation and the counter-based generator used everywhere.

All randomness flows from integer seeds: ``derive_seed`` hashes a tuple of
ints/strings with BLAKE2b into a 64-bit key, and ``generator`` wraps numpy's
Philox4x64 counter-based bit generator keyed with it. No OS entropy is read.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(*parts: int | str) -> int:
    h = hashlib.blake2b(digest_size=8, person=b"mmkd-seed")
    for p in parts:
        if isinstance(p, str):
            b = p.encode("utf-8")
            h.update(b"s" + struct.pack("<I", len(b)) + b)
        else:
            h.update(b"i" + struct.pack("<Q", int(p) & MASK64))
    return struct.unpack("<Q", h.digest())[0]


def generator(*parts: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(*parts)))

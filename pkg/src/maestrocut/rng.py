"""Deterministic named random streams.

Every random draw in the package comes from a stream derived here. A stream
is identified by a 64-bit master seed plus a path of string/int labels; the
Philox key is the first 128 bits of SHA-256 over ``seed || label0 || 0x1f ||
label1 || 0x1f ...``. Philox is counter-based, so identical (seed, path)
pairs produce identical draws on every platform, and distinct paths give
independent streams without coordination.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_key(master_seed: int, *path: object) -> int:
    """128-bit Philox key for a named stream."""
    h = hashlib.sha256()
    h.update((int(master_seed) & _MASK64).to_bytes(8, "little"))
    for part in path:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:16], "little")


def stream(master_seed: int, *path: object) -> np.random.Generator:
    """Independent generator for the named stream."""
    return np.random.Generator(np.random.Philox(key=stream_key(master_seed, *path)))

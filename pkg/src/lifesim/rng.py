"""Counter-based random streams.

Each draw is a pure function of (seed, step, purpose, index), so the order in
which work is scheduled never changes the numbers a run sees.
"""

from __future__ import annotations

import hashlib

_SCALE = float(1 << 53)


def uniform(seed: int, step: int, purpose: str, index: int = 0) -> float:
    """One uniform draw in [0, 1) from blake2b of the key, 53-bit resolution."""
    key = f"{int(seed)}:{int(step)}:{purpose}:{int(index)}".encode()
    word = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    return (word >> 11) / _SCALE


def derive_seed(seed: int, *labels) -> int:
    """Child seed for a labelled sub-run (for example one per user)."""
    key = ":".join([str(int(seed)), *map(str, labels)]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1

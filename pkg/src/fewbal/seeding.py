"""Deterministic seed derivation for nested experiment streams."""

from __future__ import annotations

import hashlib


def mix64(*parts: object) -> int:
    """Derive a stable 64-bit seed from heterogeneous parts.

    Hashes the string form of each part (blake2b, 8-byte digest) with a
    separator so that ("ab", "c") and ("a", "bc") map to different seeds.
    The result only depends on the parts, never on process state, so grid
    cells, evaluation tasks, and validation episodes each get independent
    reproducible streams.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big")

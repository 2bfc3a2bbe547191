"""Deterministic seed derivation so one global seed fans out to every component."""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, *tags: object) -> int:
    """Return a stable 31-bit seed derived from ``seed`` and component tags.

    Uses SHA-256 instead of ``hash()`` so results survive interpreter restarts.
    """
    payload = "/".join([str(int(seed)), *map(str, tags)]).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:4], "little") & 0x7FFFFFFF

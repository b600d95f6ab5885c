"""Seed derivation: every stage and item gets a seed hashed from the master seed."""
from __future__ import annotations

import hashlib


def derive_seed(master: int, *tags) -> int:
    payload = repr((int(master),) + tuple(tags)).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big") >> 1

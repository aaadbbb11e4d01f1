"""Labeled sub-seed derivation so every random stream hangs off one run seed."""

import hashlib


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit seed for the stream named ``label`` under ``seed``."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1

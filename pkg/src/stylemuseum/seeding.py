"""Stable seed derivation so sub-runs never share or reorder RNG streams."""

from __future__ import annotations

import hashlib

__all__ = ["derive_seed"]


def derive_seed(base: int, label: str) -> int:
    """A 31-bit seed from (base seed, label), stable across platforms and runs."""
    digest = hashlib.sha256(f"{base}:{label}".encode()).hexdigest()
    return int(digest[:8], 16) & 0x7FFFFFFF

"""Deterministic seed fan-out.

Every random stream in the package derives from one root seed plus a
string label, so independent components never share or race a stream
and full runs replay bit-identically.
"""

from __future__ import annotations

import hashlib

__all__ = ["derived_seed"]


def derived_seed(seed: int, label: str) -> int:
    """Stable 64-bit child seed for (seed, label)."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")

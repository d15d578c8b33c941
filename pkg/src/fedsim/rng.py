"""Deterministic random streams derived from structured keys.

Every stochastic step in the package (weight init, epoch shuffles, synthetic
data) pulls from its own counter-based Philox stream keyed by a tuple such as
(seed, round, client_id). Streams never depend on global RNG state or call
order, so concurrency and scheduling cannot perturb results.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "derive_seed", "stable_hash64"]

_MASK64 = (1 << 64) - 1


def stable_hash64(text: str) -> int:
    """Platform-stable 64-bit hash of a string (Python's hash() is salted)."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _entropy(parts: tuple) -> list[int]:
    out = []
    for part in parts:
        if isinstance(part, str):
            out.append(stable_hash64(part))
        elif isinstance(part, (int, np.integer)):
            out.append(int(part) & _MASK64)
        else:
            raise TypeError(f"seed part must be int or str, got {type(part).__name__}")
    return out


def stream(*parts: int | str) -> np.random.Generator:
    """Counter-based generator keyed by the given parts."""
    seq = np.random.SeedSequence(_entropy(parts))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(*parts: int | str) -> int:
    """Stable 64-bit seed from structured parts.

    Used to give each (base seed, round, client) combination its own training
    seed without any coordination between clients.
    """
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, str):
            data = part.encode("utf-8")
            h.update(b"s")
            h.update(len(data).to_bytes(4, "little"))
            h.update(data)
        elif isinstance(part, (int, np.integer)):
            h.update(b"i")
            h.update((int(part) & _MASK64).to_bytes(8, "little"))
        else:
            raise TypeError(f"seed part must be int or str, got {type(part).__name__}")
    return int.from_bytes(h.digest()[:8], "little")

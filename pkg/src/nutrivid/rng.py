"""Deterministic random-number utilities.

Random frame sampling must reproduce exactly across runs, platforms, and
reimplementations, so it uses a pinned algorithm (SplitMix64, 64-bit
state) instead of whatever generator the host library ships. Stream
seeds are derived by hashing a base seed with context tokens, which
keeps per-video / per-epoch streams independent without global state.
"""

from __future__ import annotations

import hashlib

RNG_ALGORITHM = "splitmix64/v1"

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator (Steele, Lea, Flood 2014)."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """Draw from Uniform[low, high) with 53-bit resolution."""
        unit = (self.next_u64() >> 11) * 2.0**-53
        return low + unit * (high - low)


def derive_seed(base_seed: int, *context: object) -> int:
    """Derive a 64-bit stream seed from a base seed plus context tokens.

    Uses BLAKE2b, so the value is stable across processes and platforms
    (unlike the builtin ``hash``). Tokens are stringified; use short,
    unambiguous labels such as ("dropout", fold, epoch).
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base_seed)).encode())
    for token in context:
        h.update(b"\x1f")
        h.update(str(token).encode())
    return int.from_bytes(h.digest(), "little")

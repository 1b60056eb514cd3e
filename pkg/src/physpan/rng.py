"""Counter-free splitmix64 PRNG.

Platform RNGs (and numpy's) are avoided everywhere determinism is promised:
this generator is pure 64-bit integer arithmetic, so identical seeds give
identical streams on every platform and interpreter.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive(seed: int, *keys: int) -> int:
    """Derive an independent stream seed from a base seed and integer keys."""
    state = _mix((seed & _MASK) ^ _GOLDEN)
    for k in keys:
        state = _mix((state + (k & _MASK) * _GOLDEN) & _MASK)
    return state


class SplitMix64:
    """Sequential splitmix64 stream with float/int/shuffle helpers."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n). Rejection-free modulo is fine at our scales."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return self.next_u64() % n

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def uniform_values(self, n: int, lo: float, hi: float) -> list[float]:
        return [self.uniform(lo, hi) for _ in range(n)]

    def spawn(self, key: int) -> "SplitMix64":
        """Independent child stream; deterministic in (current state, key)."""
        return SplitMix64(derive(self._state, key))

"""Counter-based SplitMix64 generator used by every instance generator.

The stream is fully specified so that a seed produces the same instance on any
platform and numpy version:

* state advances by the golden-ratio increment ``0x9E3779B97F4A7C15`` per draw,
  and each output is the standard SplitMix64 finalizer of the new state;
* ``uniform`` maps the top 53 bits of an output to ``[0, 1)``;
* ``normal`` uses the Box-Muller transform on consecutive uniform pairs
  ``(u1, u2)``: ``sqrt(-2 ln(1 - u1)) * (cos(2 pi u2), sin(2 pi u2))``, emitting
  both values in that order.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Deterministic 64-bit PRNG with vectorized draws."""

    def __init__(self, seed: int):
        self._state = np.uint64(int(seed) & _MASK)

    def next_u64(self, size: int) -> np.ndarray:
        if size <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, size + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = self._state + steps * _GAMMA
            self._state = z[-1]
            return _mix(z)

    def uniform(self, size: int) -> np.ndarray:
        bits = self.next_u64(size) >> np.uint64(11)
        return bits.astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, size: int, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        pairs = (size + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).ravel()
        return loc + scale * z[:size]

    def bernoulli(self, p: float, size: int) -> np.ndarray:
        return self.uniform(size) < p

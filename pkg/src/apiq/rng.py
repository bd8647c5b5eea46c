"""Counter-based random number generation.

Every stream is a (seed, counter) pair; the value at position i is a pure
function of (seed, i), so streams are reproducible bit-for-bit on every
platform and independent streams can be derived cheaply for sub-tasks
(one per calibrated layer, one for data sampling, ...).

The mixing function is splitmix64; normal deviates come from Box-Muller
applied to consecutive counter outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64
_TWO53 = float(1 << 53)


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer, vectorized over uint64 arrays
    x = (x ^ (x >> _U64(30))) * _MIX1
    x = (x ^ (x >> _U64(27))) * _MIX2
    return x ^ (x >> _U64(31))


@dataclass
class RngState:
    """Seeded counter stream. Advancing only bumps the counter."""

    seed: int
    counter: int = 0

    def _raw(self, n: int) -> np.ndarray:
        """Next n uint64 outputs, advancing the counter."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(_U64(self.seed & 0xFFFFFFFFFFFFFFFF) + idx * _GOLDEN)

    def derive(self, tag: int) -> "RngState":
        """Independent child stream; same (seed, tag) always gives the same child."""
        mask = 0xFFFFFFFFFFFFFFFF
        mixed = ((self.seed ^ 0x5851F42D4C957F2D) + (tag + 1) * 0x9E3779B97F4A7C15) & mask
        with np.errstate(over="ignore"):
            child = _mix(np.uint64(mixed))
        return RngState(seed=int(child))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform f64 samples in [low, high)."""
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        u = (self._raw(n) >> _U64(11)).astype(np.float64) / _TWO53
        out = low + (high - low) * u
        return out.reshape(shape)

    def randn(self, shape=()) -> np.ndarray:
        """I.i.d. standard normal f64 samples (Box-Muller on the counter stream)."""
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        pairs = (n + 1) // 2
        raw = self._raw(2 * pairs)
        # u1 in (0, 1] so the log never sees zero
        u1 = ((raw[:pairs] >> _U64(11)).astype(np.float64) + 1.0) / _TWO53
        u2 = (raw[pairs:] >> _U64(11)).astype(np.float64) / _TWO53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def randint(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high). Modulo bias is negligible at desk scale."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        span = _U64(high - low)
        vals = (self._raw(n) % span).astype(np.int64) + low
        return vals.reshape(shape)

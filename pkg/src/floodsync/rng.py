"""Seeded random streams for reproducible simulation runs.

Two kinds of streams are used:

* ``KeyedStream`` -- a tiny counter-based generator (splitmix64) whose state
  is derived from an integer key tuple.  The channel keys one stream per
  reception (seed, link, round, packet index), so the delay experienced on a
  given link in a given round is a pure function of the experiment seed.
  Runs of different protocols under the same seed therefore see the same
  delay realizations on the same (link, round) coordinates, which makes
  cross-protocol comparisons common-random-number experiments.
* numpy ``Generator`` children derived from ``SeedSequence`` for per-node
  purposes (drift assignment, boot offsets, hold-off timers, period phases).

Never use Python's ``hash()`` here: it is salted per process and would break
run-to-run determinism.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15

# Stream purposes; part of every derived key so purposes never collide.
DELAY = 1
DRIFT = 2
OFFSET = 3
HOLDOFF = 4
PHASE = 5
WANDER = 6


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def derive_key(*parts: int) -> int:
    """Combine integer key parts into one 64-bit stream key."""
    k = 0x8BADF00D5EED
    for p in parts:
        k = _mix((k + _GAMMA + (int(p) & _MASK)) & _MASK)
    return k


class KeyedStream:
    """Deterministic stream of doubles derived from an integer key tuple."""

    __slots__ = ("_state",)

    def __init__(self, *parts: int):
        self._state = derive_key(*parts)

    def _next(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix(self._state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """Uniform double in [lo, hi)."""
        u = self._next() >> 11  # 53 random bits
        return lo + (hi - lo) * (u * (1.0 / (1 << 53)))

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        """Gaussian via Box-Muller (one value per call, no caching)."""
        u1 = self.uniform()
        while u1 <= 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return mu + sigma * z


def node_rng(seed: int, purpose: int, node_id: int) -> np.random.Generator:
    """numpy Generator for a per-node, per-purpose stream."""
    return np.random.default_rng(np.random.SeedSequence((seed, purpose, node_id)))


def purpose_rng(seed: int, purpose: int) -> np.random.Generator:
    """numpy Generator for a run-level stream (bulk sampling, analytics)."""
    return np.random.default_rng(np.random.SeedSequence((seed, purpose)))

"""Reproducible random streams.

A :class:`RandomStream` names a point in a deterministic tree of generators:
the pair ``(seed, stream_id)`` fully determines every random number drawn
from it, on every platform, regardless of how work is scheduled.  Parallel
estimators never share a stream between workers; they derive one child
stream per replica block and merge results in block order, so the worker
count cannot influence any estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

# Salt for kernel state derivation, distinct from child-id derivation.
_KERNEL_SALT = 0x9E3779B97F4A7C15


def _mix64(x: int) -> int:
    """splitmix64 finalizer, the usual avalanche for combining ids."""
    x &= _MASK64
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def stable_tag(text: str) -> int:
    """Map a short label (a CLI command name, say) to a stable 64-bit id."""
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


@dataclass(frozen=True)
class RandomStream:
    """A named, reproducible source of randomness.

    Attributes:
        seed: user-facing seed, reported verbatim in output records.
        stream_id: position in the derivation tree, 0 for the root.
    """

    seed: int
    stream_id: int = 0

    def child(self, *keys: int) -> "RandomStream":
        """Derive a sub-stream, deterministically, from integer keys."""
        sid = self.stream_id
        for k in keys:
            sid = _mix64(sid * 0x2545F4914F6CDD1D + _mix64(k) + 1)
        return RandomStream(self.seed, sid)

    def tagged(self, label: str) -> "RandomStream":
        """Derive a sub-stream from a text label."""
        return self.child(stable_tag(label))

    def generator(self) -> np.random.Generator:
        """A fresh numpy generator for this stream (same one every call)."""
        ss = np.random.SeedSequence(
            [self.seed & _MASK64, self.stream_id & _MASK64]
        )
        return np.random.Generator(np.random.PCG64(ss))

    def kernel_state(self, block: int) -> np.ndarray:
        """256-bit xoshiro state for replica block ``block`` of this stream.

        Distinct blocks get statistically independent states; the mapping
        depends only on (seed, stream_id, block).
        """
        ss = np.random.SeedSequence(
            [
                self.seed & _MASK64,
                self.stream_id & _MASK64,
                int(block) & _MASK64,
                _KERNEL_SALT,
            ]
        )
        state = ss.generate_state(4, np.uint64)
        if not state.any():  # all-zero is the one invalid xoshiro state
            state[0] = np.uint64(1)
        return state

"""Deterministic random-number streams.

All randomness in the package flows from a single 64-bit root seed through
splittable, counter-based streams.  A stream is addressed by the root seed
plus a tuple of small integers (the "path"), so any unit of work -- a
simulation replicate, a subsample candidate -- owns its own generator and
produces identical output whether the work runs serially or in parallel.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _check_seed(seed: int) -> int:
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    return int(seed) & _MASK64


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for stream (seed, *path).

    Streams with distinct paths are statistically independent; the same
    (seed, path) always yields the same generator state.
    """
    seq = np.random.SeedSequence(_check_seed(seed), spawn_key=tuple(int(q) for q in path))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed: int, *path: int) -> int:
    """Derive a 64-bit child seed for a nested component.

    Used where a sub-procedure takes a plain integer seed of its own
    (e.g. the per-replicate seed handed to the estimator config).
    """
    seq = np.random.SeedSequence(_check_seed(seed), spawn_key=tuple(int(q) for q in path))
    lo, hi = seq.generate_state(2, np.uint32)
    return (int(hi) << 32) | int(lo)

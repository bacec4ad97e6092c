"""Counter-based random streams.

Every stochastic operation in this package takes an explicit
``numpy.random.Generator``.  Streams are built on the Philox counter-based
bit generator so that (a) a stream is fully determined by an integer key
tuple and (b) independent sub-streams can be split off with ``spawn``
without coordination.  Identical keys give identical draws on every
platform, up to the floating-point determinism of the underlying linear
algebra.
"""

from __future__ import annotations

import numpy as np

__all__ = ["stream", "split"]


def stream(*key: int) -> np.random.Generator:
    """Create an independent generator addressed by an integer key tuple."""
    if not key:
        raise ValueError("stream requires at least one key integer")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split ``n`` independent child streams off an existing generator."""
    return rng.spawn(n)

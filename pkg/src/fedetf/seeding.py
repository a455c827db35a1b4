"""Named random sub-streams derived from a single experiment seed.

Every consumer of randomness asks for a generator keyed by a purpose tag plus
optional integer coordinates (round, client id, ...).  Streams for different
purposes never share state, so e.g. changing client sampling leaves the data
partition untouched.
"""

import zlib

import numpy as np

PURPOSES = ("data", "centers", "partition", "init", "etf", "sampling", "shuffle")


def _tag(purpose: str) -> int:
    if purpose not in PURPOSES:
        raise KeyError(f"unknown random stream purpose {purpose!r}")
    return zlib.crc32(purpose.encode("ascii"))


def substream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Generator for ``purpose`` at coordinates ``keys``; pure function of its inputs."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    entropy = [int(seed), _tag(purpose), *(int(k) for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def subseed(seed: int, purpose: str, *keys: int) -> int:
    """A 63-bit integer seed for APIs that take a plain integer."""
    return int(substream(seed, purpose, *keys).integers(0, 2**63 - 1))

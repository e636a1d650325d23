"""Named random sub-streams derived from a single 64-bit seed."""

import zlib

import numpy as np

STREAMS = ("init", "shuffle", "sampling", "data", "split")


def rng_for(seed, stream):
    """Independent generator for ``stream``; same (seed, stream) always gives the same draws."""
    key = zlib.crc32(stream.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), key]))

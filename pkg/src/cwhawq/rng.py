"""Named random substreams derived from a single run seed."""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed, *names):
    """Return a Generator that depends only on ``seed`` and the name path.

    ``substream(0, "probe", 3)`` is identical across runs and processes and is
    independent of the order in which other substreams are drawn.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[_key(n) for n in names]])
    return np.random.Generator(np.random.PCG64(ss))


def rademacher(rng, shape):
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0

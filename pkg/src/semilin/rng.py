"""Counter-based random streams keyed by (seed, purpose tag, index...).

Each key maps to an independent Philox generator, so any sample block can be
regenerated on its own (training batch k, bank chunk j, ...) without replaying
the draws that precede it.
"""

import zlib

import numpy as np


def _tag_key(tag):
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed, tag, *index):
    """Generator for ``(seed, tag, *index)``; identical keys give identical draws."""
    key = (_tag_key(tag),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, tag, *index):
    """A 63-bit integer seed derived from a key (for child experiments)."""
    key = (_tag_key(tag),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

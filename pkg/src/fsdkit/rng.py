"""Named random substreams derived from one top-level seed."""
import zlib

import numpy as np


def substream(seed, name, *index):
    """Return a Generator for stream `name` (optionally indexed) under `seed`.

    Streams with different names or indices are statistically independent and
    never depend on the order in which they are requested.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))

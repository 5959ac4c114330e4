"""Named random sub-streams derived from one root seed."""
import zlib

import numpy as np

STREAMS = ("scenario", "perception", "noise", "init", "train", "denoise")


def stream_key(name):
    return zlib.crc32(name.encode("utf-8"))


def substream(seed, name, *extra):
    """Return a Generator for stream ``name`` of root ``seed``.

    Distinct names (and distinct ``extra`` integers) never share state, so
    modules seeded from the same root do not collide.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, stream_key(name)]
    entropy.extend(int(e) & 0xFFFFFFFFFFFFFFFF for e in extra)
    return np.random.default_rng(np.random.SeedSequence(entropy))

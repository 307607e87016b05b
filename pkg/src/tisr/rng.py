"""Named, counter-based random streams.

Each consumer (init, dropout, corpus, batching) gets its own Philox stream
keyed by ``(seed, name, *extra)``, so adding a consumer never shifts the
draws seen by another.
"""
import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8")), *(int(e) for e in extra)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))

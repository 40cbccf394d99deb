"""Named random streams derived from one 64-bit seed.

Every consumer asks for ``stream(seed, "some/name")``; the name is hashed into
the spawn key of a ``SeedSequence`` so streams are independent of call order.
"""

import hashlib

import numpy as np


def _name_key(name: str) -> tuple:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def stream(seed: int, name: str) -> np.random.Generator:
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=_name_key(name))
    return np.random.Generator(np.random.PCG64(ss))

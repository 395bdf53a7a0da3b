"""Counter-based random streams keyed on run identity.

Every stochastic decision draws from a Philox stream whose key is derived
from (seed, image_id, ...), so scheduling order never changes results.
"""

import hashlib

import numpy as np


def stable_int(value) -> int:
    """64-bit integer digest of any str/int key, stable across processes."""
    if isinstance(value, (int, np.integer)) and value >= 0:
        return int(value)
    digest = hashlib.blake2b(str(value).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def keyed_rng(seed: int, *keys) -> np.random.Generator:
    words = [int(seed) & (2**64 - 1)] + [stable_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

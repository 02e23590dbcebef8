"""Counter-based random streams keyed by hashed labels.

Every sample draws from a Philox generator whose key is derived from
``(base_seed, scenario_label, iteration)``, so results do not depend on which
worker ran an iteration or in what order.
"""

import hashlib

import numpy as np

_HASH_VERSION = b"gmethods-seed-v1"


def derive_seed(base_seed: int, scenario_label: str, iteration: int) -> int:
    """64-bit seed from a BLAKE2b digest of the inputs."""
    msg = f"{int(base_seed)}\x1f{scenario_label}\x1f{int(iteration)}".encode()
    digest = hashlib.blake2b(msg, digest_size=8, person=_HASH_VERSION[:16]).digest()
    return int.from_bytes(digest, "little")


def generator(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator for ``(seed, stream)``; streams never overlap."""
    seed = int(seed) & ((1 << 64) - 1)
    return np.random.Generator(np.random.Philox(key=np.array([seed, int(stream)], dtype=np.uint64)))

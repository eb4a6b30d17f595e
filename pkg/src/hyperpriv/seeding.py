"""Deterministic stream splitting for every random draw in the package.

All randomness flows from a single root seed.  Independent consumers derive
child seeds by hashing the root together with a textual path, and each child
seed keys a counter-based Philox generator, so streams are stable under
platform, thread count and call order.
"""

import hashlib

import numpy as np

_SEED_BITS = 128


def child_seed(root_seed: int, *path) -> int:
    """Derive a child seed from ``root_seed`` and a path of labels.

    The same (root, path) pair always yields the same 128-bit integer, and
    distinct paths yield independent streams.
    """
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[: _SEED_BITS // 8], "big")


def rng(root_seed: int, *path) -> np.random.Generator:
    """Counter-based generator for the stream named by ``path``."""
    return np.random.Generator(np.random.Philox(key=child_seed(root_seed, *path)))

"""Small shared helpers: seeded generators and content hashes."""

from __future__ import annotations

import hashlib

import numpy as np

RNG_NAME = "numpy.Philox"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every stochastic choice in the pipeline."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _key_int(key) -> int:
    if isinstance(key, str):
        return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
    return int(key)


def derive_seed(master: int, *keys) -> int:
    """Independent child seed from a master seed and integer or string keys."""
    ss = np.random.SeedSequence([int(master), *map(_key_int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()

"""Named deterministic random streams.

Every stochastic draw in the package goes through a stream keyed by a
global seed plus string/int labels (slide id, epoch, group id, ...), so
results are reproducible and independent of evaluation order.  String
keys are hashed with SHA-256 rather than ``hash()`` so streams are
stable across processes and interpreter versions.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK32 = 0xFFFFFFFF


def _as_entropy(key: int | str) -> int:
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    return int(key) & 0xFFFFFFFFFFFFFFFF


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return a generator for the stream named by (seed, *keys)."""
    entropy = [_as_entropy(seed)] + [_as_entropy(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def child_seed(seed: int, *keys: int | str) -> int:
    """Derive a 32-bit integer seed for APIs that take a plain seed."""
    entropy = [_as_entropy(seed)] + [_as_entropy(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0]) & _MASK32

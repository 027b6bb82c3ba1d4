"""
Keyed, counter-based random streams.

Every random draw in a run comes from a Philox generator whose key is
(master_seed, scenario stream key, replicate, purpose, ...). Streams never
depend on execution order, so results are identical for any worker count.
"""
from __future__ import annotations

import hashlib
from typing import Tuple, Union

import numpy as np

KeyPart = Union[int, str]


def _word(part: KeyPart) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        v = int(part)
        if v < 0:
            raise ValueError(f"stream key parts must be non-negative, got {v}")
        return v
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def make_stream(master_seed: int, *key: KeyPart) -> np.random.Generator:
    """Return an independent Philox generator for (master_seed, *key)."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(_word(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class StreamFactory:
    """Binds the scenario-level part of the key; call it with the rest."""

    def __init__(self, master_seed: int, *prefix: KeyPart):
        self.master_seed = int(master_seed)
        self.prefix: Tuple[KeyPart, ...] = tuple(prefix)

    def __call__(self, *key: KeyPart) -> np.random.Generator:
        return make_stream(self.master_seed, *self.prefix, *key)

    def child(self, *key: KeyPart) -> "StreamFactory":
        return StreamFactory(self.master_seed, *self.prefix, *key)

    def __repr__(self) -> str:
        return f"StreamFactory(seed={self.master_seed}, prefix={self.prefix!r})"

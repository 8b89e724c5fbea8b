"""Position-derived seeds.

Every random stream in the simulator is keyed by a tuple such as
``(master_seed, "local", round, client_id)`` so that any component can replay
exactly the randomness another component used, independent of call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Mix ``parts`` into a 64-bit unsigned seed (blake2b over their repr)."""
    payload = "\x1f".join(f"{type(p).__name__}:{p}" for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def rng_for(*parts: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))

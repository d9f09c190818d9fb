"""Deterministic seed derivation for independent RNG streams.

Every random draw in the simulator comes from a numpy Generator seeded with
a child seed derived from (master_seed, component_tag, *indices).  Child
seeds are stable across platforms and python processes (hash-based, not
``hash()``-based, which is salted).
"""

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def child_seed(master_seed, tag, *indices):
    """Derive a 64-bit child seed from a master seed, a tag, and indices.

    Indices may be integers or strings (for composite stream tags).
    """
    h = hashlib.sha256()
    h.update(int(master_seed & MASK64).to_bytes(8, "little"))
    h.update(tag.encode("utf-8"))
    for idx in indices:
        if isinstance(idx, str):
            h.update(b"\x00" + idx.encode("utf-8"))
        else:
            h.update(b"\x01" + int(idx & MASK64).to_bytes(8, "little"))
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(master_seed, tag, *indices):
    """A fresh ``numpy.random.Generator`` for an independent stream."""
    return np.random.Generator(np.random.PCG64(child_seed(master_seed, tag, *indices)))

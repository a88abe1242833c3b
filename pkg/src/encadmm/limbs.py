"""Multi-precision residues modulo a power of two, stored as 32-bit limbs.

A residue ``x`` in ``[0, 2**bits)`` is held as ``ceil(bits / 32)`` little-endian
``uint32`` limbs along the last axis of an array.  Python ``int`` is the
exchange format at the boundaries (keys, decryption, serialization).
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

LIMB_BITS = 32


def limb_count(bits: int) -> int:
    return (bits + LIMB_BITS - 1) // LIMB_BITS


def top_mask(bits: int) -> int:
    """Mask applied to the most significant limb so values stay below ``2**bits``."""
    rem = bits - LIMB_BITS * (limb_count(bits) - 1)
    return (1 << rem) - 1


def to_limbs(values: Iterable[int] | int, bits: int) -> np.ndarray:
    """Reduce integers modulo ``2**bits`` and split them into limbs.

    Accepts a scalar, a flat iterable or an object ndarray; the result has
    shape ``np.shape(values) + (L,)``.
    """
    arr = np.asarray(values, dtype=object)
    shape = arr.shape
    L = limb_count(bits)
    modulus = 1 << bits
    width = 4 * L
    raw = b"".join((int(v) % modulus).to_bytes(width, "little") for v in arr.reshape(-1))
    out = np.frombuffer(raw, dtype="<u4").astype(np.uint32)
    return out.reshape(shape + (L,))


def from_limbs(limbs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_limbs`; returns an object array of Python ints."""
    limbs = np.asarray(limbs, dtype=np.uint32)
    L = limbs.shape[-1]
    shape = limbs.shape[:-1]
    raw = np.ascontiguousarray(limbs).astype("<u4").tobytes()
    width = 4 * L
    count = len(raw) // width if width else 0
    out = np.empty(count, dtype=object)
    for idx in range(count):
        out[idx] = int.from_bytes(raw[idx * width:(idx + 1) * width], "little")
    return out.reshape(shape)


def limbs_to_int(limbs: np.ndarray) -> int:
    """Single residue (shape ``(L,)``) to a Python int."""
    return int.from_bytes(np.asarray(limbs, dtype="<u4").tobytes(), "little")


def random_limbs(rng: np.random.Generator, shape: tuple[int, ...], bits: int) -> np.ndarray:
    """Uniform residues modulo ``2**bits``."""
    L = limb_count(bits)
    out = rng.integers(0, 1 << LIMB_BITS, size=shape + (L,), dtype=np.uint32)
    out[..., -1] &= np.uint32(top_mask(bits))
    return out


def to_bytes_be(limbs: np.ndarray) -> bytes:
    """Fixed-width big-endian bytes of each residue, concatenated in C order."""
    return np.ascontiguousarray(limbs[..., ::-1]).astype(">u4").tobytes()


def from_bytes_be(raw: bytes, count: int, bits: int) -> np.ndarray:
    L = limb_count(bits)
    if len(raw) != 4 * L * count:
        raise ValueError(f"expected {4 * L * count} bytes for {count} residues, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=">u4").astype(np.uint32).reshape(count, L)
    if count and (arr[:, 0] & ~np.uint32(top_mask(bits))).any():
        raise ValueError("residue exceeds modulus")
    return np.ascontiguousarray(arr[:, ::-1])

"""Hot residue kernels with a numba path and a pure-numpy path.

Two operations dominate the encrypted pipeline, both on limb arrays
(see :mod:`encadmm.limbs`) modulo ``2**bits``:

``lincomb(K, X, bits)``
    ``out[r, c] = sum_j K[r, j] * X[j, c]  (mod 2**bits)`` for a small signed
    integer matrix ``K`` (``|K| < 2**63``).  Encryption (subset sums of the
    public key), plaintext-constant products and key switching all reduce to it.
``add`` / ``sub``
    Elementwise residue addition and subtraction.

Large products always take the numpy route: exact float64 BLAS on 16- or
32-bit limb slices outruns the numba loop once the product has more than
``HANDOFF_WORK`` multiply-adds.

The backend is chosen once at import: numba when importable, unless the
environment variable ``ENCADMM_NO_NUMBA`` is set to a non-empty value other
than ``0``.  Every function also takes an explicit ``backend`` override,
which the tests and ``benchmarks/bench_kernels.py`` use to run both paths.
"""

from __future__ import annotations

import os

import numpy as np

from .limbs import limb_count, top_mask

try:  # pragma: no cover - exercised implicitly
    from . import _numba_kernels as _nb
except ImportError:  # pragma: no cover
    _nb = None

_flag = os.environ.get("ENCADMM_NO_NUMBA", "")
NUMBA_AVAILABLE = _nb is not None
BACKEND = "numba" if NUMBA_AVAILABLE and _flag in ("", "0") else "numpy"

# exact float64 accumulation needs every partial sum below 2**53
_EXACT = 1 << 53
_CHUNK_BYTES = 64 << 20
_ROW_BLOCK = 1024
# above this many multiply-adds the BLAS route beats the numba loop
# (benchmarks/bench_kernels.py), so the numba backend hands off
HANDOFF_WORK = 2_000_000


def _resolve(backend: str | None) -> str:
    backend = backend or BACKEND
    if backend == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba backend requested but numba is not importable")
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


def lincomb(K, X: np.ndarray, bits: int, backend: str | None = None) -> np.ndarray:
    """Integer-matrix times residue-matrix product modulo ``2**bits``.

    Parameters
    ----------
    K : array_like of int, shape (r, m)
        Signed multipliers with ``|K| < 2**63``.
    X : ndarray of uint32, shape (m, c, L)
        Residues in limb form.
    bits : int
        Modulus exponent; ``L == limb_count(bits)``.

    Returns
    -------
    ndarray of uint32, shape (r, c, L)
    """
    K = np.asarray(K, dtype=np.int64)
    if K.ndim != 2 or X.ndim != 3 or K.shape[1] != X.shape[0]:
        raise ValueError(f"shape mismatch: K{K.shape} X{X.shape}")
    if X.shape[2] != limb_count(bits):
        raise ValueError("limb count does not match modulus")
    if np.any(K == np.iinfo(np.int64).min):
        raise OverflowError("multiplier magnitude must be below 2**63")
    if _resolve(backend) == "numba" and K.shape[0] * K.shape[1] * X.shape[1] <= HANDOFF_WORK:
        return _nb.lincomb(np.ascontiguousarray(K), np.ascontiguousarray(X, dtype=np.uint32),
                           top_mask(bits))
    return _lincomb_numpy(K, np.ascontiguousarray(X, dtype=np.uint32), bits)


def add(X: np.ndarray, Y: np.ndarray, bits: int, backend: str | None = None) -> np.ndarray:
    return _addsub(X, Y, bits, 1, backend)


def sub(X: np.ndarray, Y: np.ndarray, bits: int, backend: str | None = None) -> np.ndarray:
    return _addsub(X, Y, bits, -1, backend)


def _addsub(X, Y, bits, sign, backend):
    if X.shape != Y.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {Y.shape}")
    shape = X.shape
    L = shape[-1]
    Xf = np.ascontiguousarray(X, dtype=np.uint32).reshape(-1, L)
    Yf = np.ascontiguousarray(Y, dtype=np.uint32).reshape(-1, L)
    if _resolve(backend) == "numba":
        return _nb.addsub(Xf, Yf, sign, top_mask(bits)).reshape(shape)
    acc = Xf.astype(np.int64)
    if sign > 0:
        acc += Yf
    else:
        acc -= Yf
    return _carry(acc, 32, L, bits).reshape(shape)


def _carry(acc: np.ndarray, width: int, keep: int, bits: int) -> np.ndarray:
    """Propagate signed carries along the last axis and repack as uint32 limbs.

    ``acc`` holds int64 limb sums of ``width`` bits each; positions at or
    beyond ``keep`` limbs are dropped (reduction modulo a power of two).
    """
    mask = (1 << width) - 1
    carry = np.zeros(acc.shape[:-1], dtype=np.int64)
    out = np.empty(acc.shape[:-1] + (keep,), dtype=np.int64)
    for i in range(keep):
        v = acc[..., i] + carry
        out[..., i] = v & mask
        carry = v >> width
    if width == 32:
        res = out.astype(np.uint32)
    else:
        res = np.ascontiguousarray(out.astype(np.uint16)).view(np.uint32)
    res[..., -1] &= np.uint32(top_mask(bits))
    return res


def _lincomb_numpy(K: np.ndarray, X: np.ndarray, bits: int) -> np.ndarray:
    r, m = K.shape
    c, L = X.shape[1], X.shape[2]
    if r > _ROW_BLOCK:
        return np.concatenate([_lincomb_numpy(K[s:s + _ROW_BLOCK], X, bits)
                               for s in range(0, r, _ROW_BLOCK)])
    if r == 0 or m == 0:
        return np.zeros((r, c, L), dtype=np.uint32)
    kabs = np.abs(K).astype(np.uint64)
    kmax = int(kabs.max())
    if kmax == 0:
        return np.zeros((r, c, L), dtype=np.uint32)
    if m * kmax * ((1 << 32) - 1) < _EXACT:
        width, Xw = 32, X
        pieces = [kabs]
    else:
        if m * ((1 << 16) - 1) ** 2 >= _EXACT:
            raise OverflowError("too many terms for exact float64 accumulation")
        width, Xw = 16, X.view(np.uint16)
        npieces = (kmax.bit_length() + 15) // 16
        pieces = [(kabs >> np.uint64(16 * p)) & np.uint64(0xFFFF) for p in range(npieces)]
    nl = Xw.shape[-1]
    keep = L * (32 // width)
    Xflat = Xw.reshape(m, c * nl)
    acc = np.zeros((r, c, nl + len(pieces) + 1), dtype=np.int64)
    rows = max(1, _CHUNK_BYTES // (8 * c * nl))
    positive, negative = K > 0, K < 0
    for sgn, sel in ((1, positive), (-1, negative)):
        if not sel.any():
            continue
        mats = [np.where(sel, piece, 0).astype(np.float64) for piece in pieces]
        sums = [np.zeros((r, c * nl)) for _ in pieces]
        for s in range(0, m, rows):
            block = Xflat[s:s + rows].astype(np.float64)
            for mat, tot in zip(mats, sums):
                tot += mat[:, s:s + rows] @ block
        for p, tot in enumerate(sums):
            acc[:, :, p:p + nl] += sgn * tot.reshape(r, c, nl).astype(np.int64)
    return _carry(acc, width, keep, bits)

"""numba implementations of the residue kernels (see :mod:`encadmm.kernels`)."""

import numpy as np
from numba import njit

_M32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_ONE = np.uint64(1)


@njit(cache=True)
def _normalize_diff(pos, neg, top_mask, out):
    # out = (pos - neg) mod 2**bits, pos/neg hold unnormalized limb sums
    r, c, L = out.shape
    tm = np.uint64(top_mask)
    base = _ONE << _S32
    for row in range(r):
        for col in range(c):
            cp = np.uint64(0)
            cn = np.uint64(0)
            borrow = np.uint64(0)
            for i in range(L):
                vp = pos[row, col, i] + cp
                cp = vp >> _S32
                vp &= _M32
                vn = neg[row, col, i] + cn
                cn = vn >> _S32
                vn &= _M32
                d = vp + base - vn - borrow
                borrow = _ONE - (d >> _S32)
                out[row, col, i] = np.uint32(d & _M32)
            out[row, col, L - 1] = np.uint32(np.uint64(out[row, col, L - 1]) & tm)


@njit(cache=True)
def lincomb(K, X, top_mask):
    r, m = K.shape
    c = X.shape[1]
    L = X.shape[2]
    pos = np.zeros((r, c, L + 2), np.uint64)
    neg = np.zeros((r, c, L + 2), np.uint64)
    for row in range(r):
        for j in range(m):
            k = K[row, j]
            if k == 0:
                continue
            if k > 0:
                acc = pos
                kk = np.uint64(k)
            else:
                acc = neg
                kk = np.uint64(-k)
            lo = kk & _M32
            hi = kk >> _S32
            if kk == _ONE:
                for col in range(c):
                    for i in range(L):
                        acc[row, col, i] += np.uint64(X[j, col, i])
            elif hi == 0:
                for col in range(c):
                    for i in range(L):
                        p = np.uint64(X[j, col, i]) * lo
                        acc[row, col, i] += p & _M32
                        acc[row, col, i + 1] += p >> _S32
            else:
                for col in range(c):
                    for i in range(L):
                        x = np.uint64(X[j, col, i])
                        p = x * lo
                        acc[row, col, i] += p & _M32
                        acc[row, col, i + 1] += p >> _S32
                        p = x * hi
                        acc[row, col, i + 1] += p & _M32
                        acc[row, col, i + 2] += p >> _S32
    out = np.empty((r, c, L), np.uint32)
    _normalize_diff(pos, neg, top_mask, out)
    return out


@njit(cache=True)
def addsub(X, Y, sign, top_mask):
    # X + sign*Y for sign in {+1, -1}; X, Y flattened to (count, L)
    n, L = X.shape
    out = np.empty((n, L), np.uint32)
    tm = np.uint64(top_mask)
    base = _ONE << _S32
    for e in range(n):
        carry = np.uint64(0)
        if sign > 0:
            for i in range(L):
                v = np.uint64(X[e, i]) + np.uint64(Y[e, i]) + carry
                carry = v >> _S32
                out[e, i] = np.uint32(v & _M32)
        else:
            for i in range(L):
                v = np.uint64(X[e, i]) + base - np.uint64(Y[e, i]) - carry
                carry = _ONE - (v >> _S32)
                out[e, i] = np.uint32(v & _M32)
        out[e, L - 1] = np.uint32(np.uint64(out[e, L - 1]) & tm)
    return out

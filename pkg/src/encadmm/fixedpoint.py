"""Fixed-point message encoding onto Z_q with scale-exponent bookkeeping.

A real ``x`` is encoded as ``round(S * x) mod q`` with combined scale
``S = s * sigma``.  Every multiplication by an encoded plaintext constant
multiplies the overall scaling by ``S`` again, so a value that went through
``e - 1`` such products decodes by dividing its centered residue by ``S**e``.
No rescaling ever happens; the modulus ``q = q0 * S**L`` absorbs ``L`` levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class CodecError(ValueError):
    """Invalid codec parameters or an out-of-range plaintext."""


class ScaleMismatch(CodecError):
    pass


class LevelExhausted(CodecError):
    pass


@dataclass(frozen=True)
class BudgetReport:
    ok: bool
    depth: int
    detail: str

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class FpValue:
    residue: int
    scale_exp: int = 1


def _round_half_away(y: Fraction) -> int:
    n = math.floor(abs(y) + Fraction(1, 2))
    return n if y >= 0 else -n


@dataclass(frozen=True)
class FpCodec:
    """Encoding parameters.

    ``modulus`` overrides the default ``q0 * S**L`` (handy for toy examples
    such as ``S = 4, q = 97``); the overflow bound is still enforced.
    """

    s: int = 2 ** 12
    sigma: int = 2 ** 11
    q0: int = 2 ** 25
    L: int = 16
    B: float = 100.0
    modulus: int | None = None

    def __post_init__(self):
        if self.s < 1 or self.sigma < 1:
            raise CodecError("scaling factors must be >= 1")
        if self.L < 1:
            raise CodecError("level count must be >= 1")
        if self.B <= 0:
            raise CodecError("range bound must be positive")
        if self.modulus is None and self.q0 <= self.S:
            raise CodecError(f"base modulus q0={self.q0} must exceed S={self.S}")
        if 2 * Fraction(self.B) * self.S ** self.L > self.q:
            raise CodecError("2*B*S**L exceeds q: an overflow cannot be excluded")

    @classmethod
    def standard(cls) -> "FpCodec":
        """S = 2**23, q0 = 2**25, L = 16, B = 100."""
        return cls()

    @property
    def S(self) -> int:
        return self.s * self.sigma

    @property
    def q(self) -> int:
        return self.modulus if self.modulus is not None else self.q0 * self.S ** self.L

    @property
    def bits(self) -> int:
        """``log2(q)`` when ``q`` is a power of two, else ``None``."""
        q = self.q
        return q.bit_length() - 1 if q & (q - 1) == 0 else None

    # scalar encode / decode ---------------------------------------------

    def encode(self, x: float) -> FpValue:
        if not abs(x) <= self.B:
            raise CodecError(f"|{x}| exceeds range bound {self.B}")
        return FpValue(_round_half_away(Fraction(x) * self.S) % self.q, 1)

    def centered(self, residue: int) -> int:
        r = residue % self.q
        return r - self.q if r > self.q // 2 else r

    def decode(self, v: FpValue) -> float:
        return self.centered(v.residue) / self.S ** v.scale_exp

    def decode_exact(self, v: FpValue) -> Fraction:
        return Fraction(self.centered(v.residue), self.S ** v.scale_exp)

    # plaintext arithmetic with scale discipline ----------------------------

    def add(self, x: FpValue, y: FpValue) -> FpValue:
        if x.scale_exp != y.scale_exp:
            raise ScaleMismatch(f"scale_exp {x.scale_exp} != {y.scale_exp}")
        return FpValue((x.residue + y.residue) % self.q, x.scale_exp)

    def sub(self, x: FpValue, y: FpValue) -> FpValue:
        if x.scale_exp != y.scale_exp:
            raise ScaleMismatch(f"scale_exp {x.scale_exp} != {y.scale_exp}")
        return FpValue((x.residue - y.residue) % self.q, x.scale_exp)

    def mul(self, k: FpValue, x: FpValue) -> FpValue:
        """Product with an encoded constant ``k``; the scales multiply."""
        e = x.scale_exp + k.scale_exp
        if e > self.L:
            raise LevelExhausted(f"scale_exp {e} exceeds L={self.L}")
        return FpValue(self.centered(k.residue) * x.residue % self.q, e)

    # vectorized helpers -----------------------------------------------------

    def encode_ints(self, x) -> np.ndarray:
        """Signed (centered) encodings ``round(S*x)`` of an array as int64.

        These are the multipliers fed to the homomorphic ``scalar_mul``;
        they must fit in 63 bits.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.size and not np.all(np.abs(x) <= self.B):
            raise CodecError(f"value exceeds range bound {self.B}")
        y = x * float(self.S)
        if x.size and np.max(np.abs(y)) >= 2.0 ** 62:
            raise CodecError("encoded constant does not fit in 63 bits")
        return (np.sign(y) * np.floor(np.abs(y) + 0.5)).astype(np.int64)

    def decode_ints(self, residues, scale_exp: int) -> np.ndarray:
        return np.array([self.centered(int(r)) / self.S ** scale_exp
                         for r in np.asarray(residues, dtype=object).reshape(-1)]
                        ).reshape(np.shape(residues))

    # budget -----------------------------------------------------------------

    def budget_check(self, mult_depth: int) -> BudgetReport:
        """Can values of magnitude ``B`` reach scale ``S**mult_depth`` without overflow?"""
        if mult_depth > self.L:
            return BudgetReport(False, mult_depth, f"depth {mult_depth} exceeds L={self.L}")
        if 2 * Fraction(self.B) * self.S ** mult_depth > self.q:
            return BudgetReport(False, mult_depth,
                                f"2*B*S**{mult_depth} exceeds q (overflow possible)")
        return BudgetReport(True, mult_depth,
                            f"depth {mult_depth} <= L={self.L} and 2*B*S**{mult_depth} <= q")

    def residue_bytes(self, v: FpValue) -> bytes:
        """Big-endian, fixed width ``ceil(log2(q) / 8)``."""
        return (v.residue % self.q).to_bytes((self.q.bit_length() + 7) // 8, "big")

    def residue_from_bytes(self, raw: bytes, scale_exp: int = 1) -> FpValue:
        r = int.from_bytes(raw, "big")
        if r >= self.q:
            raise CodecError("residue out of range")
        return FpValue(r, scale_exp)

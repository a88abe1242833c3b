from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from encadmm.fixedpoint import (CodecError, FpCodec, FpValue, LevelExhausted, ScaleMismatch)

TOY = FpCodec(s=4, sigma=1, modulus=97, L=1, B=12)
STD = FpCodec.standard()


def test_toy_examples():
    assert TOY.encode(1.25) == FpValue(5, 1)
    assert TOY.encode(-1.25) == FpValue(92, 1)
    assert TOY.decode(FpValue(93, 1)) == -1.0
    assert TOY.encode(0.0).residue == 0


def test_standard_parameters():
    assert STD.S == 2 ** 23
    assert STD.q == 2 ** 25 * 2 ** (23 * 16)
    assert STD.bits == 393


def test_zero_and_round_trip():
    assert STD.encode(0.0) == FpValue(0, 1)
    for x in (1e-3, -3.75, 99.999, -100.0, 0.1):
        assert abs(STD.decode(STD.encode(x)) - x) <= 0.5 / STD.S


def test_out_of_range():
    with pytest.raises(CodecError):
        STD.encode(100.5)
    with pytest.raises(CodecError):
        STD.encode(float("nan"))


def test_bad_parameters():
    with pytest.raises(CodecError):
        FpCodec(q0=2)
    with pytest.raises(CodecError):
        FpCodec(s=4, sigma=1, modulus=95, L=1, B=12)


def test_budget():
    assert STD.budget_check(16).ok
    rep = STD.budget_check(17)
    assert not rep.ok and "exceeds L=16" in rep.detail


def test_scale_mismatch():
    with pytest.raises(ScaleMismatch):
        STD.add(FpValue(1, 1), FpValue(1, 2))


def test_level_exhausted():
    with pytest.raises(LevelExhausted):
        TOY.mul(TOY.encode(1.0), TOY.encode(1.0))


def test_mul_chain_matches_exact():
    # repeated products by encoded constants, compared with rational arithmetic
    ks = [0.5, -1.75, 3.0, 0.125, -2.5]
    v = STD.encode(1.5)
    exact = Fraction(STD.centered(v.residue), STD.S)
    for k in ks:
        ek = STD.encode(k)
        v = STD.mul(ek, v)
        exact *= Fraction(STD.centered(ek.residue), STD.S)
    assert v.scale_exp == len(ks) + 1
    assert STD.decode_exact(v) == exact
    assert float(exact) == pytest.approx(1.5 * 0.5 * -1.75 * 3.0 * 0.125 * -2.5)


def test_residue_bytes():
    v = STD.encode(-7.25)
    raw = STD.residue_bytes(v)
    assert len(raw) == 50
    assert STD.residue_from_bytes(raw) == v
    with pytest.raises(CodecError):
        TOY.residue_from_bytes(bytes([97]))


finite = st.floats(-100, 100, allow_nan=False)


@given(finite)
def test_round_trip_property(x):
    assert abs(STD.decode(STD.encode(x)) - x) <= 0.5 / STD.S


@given(finite, finite)
def test_additive(x, y):
    s = STD.add(STD.encode(x), STD.encode(y))
    assert abs(STD.decode(s) - (x + y)) <= 1.0 / STD.S


@given(st.lists(st.floats(-4, 4, allow_nan=False), min_size=1, max_size=8), finite)
@settings(max_examples=60)
def test_scale_discipline(ks, x):
    v = STD.encode(x)
    for k in ks:
        v = STD.mul(STD.encode(k), v)
    assert v.scale_exp == len(ks) + 1
    # decoding with the tracked exponent agrees with the rational product
    exact = Fraction(STD.centered(STD.encode(x).residue), STD.S)
    for k in ks:
        exact *= Fraction(STD.centered(STD.encode(k).residue), STD.S)
    assert STD.decode_exact(v) == exact


def test_encode_ints():
    ints = STD.encode_ints([0.5, -0.5, 0.0])
    assert list(ints) == [2 ** 22, -2 ** 22, 0]
    assert STD.decode_ints([STD.q - 2 ** 22], 1)[0] == -0.5

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from encadmm import lwe
from encadmm.fixedpoint import FpCodec, FpValue, LevelExhausted, ScaleMismatch
from encadmm.lwe import (InstanceMismatch, KeyCycleError, KeyRegistry, SchemeParams,
                         WireFormatError)

CODEC = FpCodec.standard()
S = CODEC.S
SMALL = SchemeParams(n=32, q=CODEC.q, levels=CODEC.L)


@pytest.fixture(scope="module")
def keys():
    return [lwe.keygen(SMALL, i, seed=100 + i) for i in range(3)]


def rng(seed=0):
    return np.random.default_rng(seed)


def within_margin(got, exact, x):
    # decryption is exact once noise < delta/2; beyond that off by noise/delta
    slack = 0 if lwe.residue_exact(x, SMALL) else x.max_noise // SMALL.delta + 1
    return all(abs(CODEC.centered(g - e)) <= slack for g, e in zip(got, exact))


def dec(k, c):
    return CODEC.decode(lwe.decrypt(k, c))


def test_params():
    assert SMALL.plain_bits == 393 and SMALL.bits == 416 and SMALL.limbs == 13
    assert SMALL.gadget_len == 26
    with pytest.raises(lwe.HEError):
        SchemeParams(n=4, q=97, levels=1)
    with pytest.raises(lwe.HEError):
        SchemeParams(n=4, q=2 ** 10, levels=1, gadget_base=3)
    assert SchemeParams.toy(CODEC).n == 256 and SchemeParams.toy(CODEC).label == "toy"


def test_keygen_deterministic():
    a, b = lwe.keygen(SMALL, 1, 5), lwe.keygen(SMALL, 1, 5)
    assert np.array_equal(a.sk, b.sk) and np.array_equal(a.pk.data, b.pk.data)
    assert not np.array_equal(a.sk, lwe.keygen(SMALL, 1, 6).sk)


def test_encrypt_zero(keys):
    c = lwe.encrypt(keys[0].pk, CODEC.encode(0.0), rng())
    assert lwe.decrypt(keys[0], c) == FpValue(0, 1)


def test_round_trip(keys):
    c = lwe.encrypt(keys[0].pk, CODEC.encode(42.5), rng())
    assert abs(dec(keys[0], c) - 42.5) <= 1 / (2 * S)


def test_fresh_ciphertexts_differ(keys):
    m = CODEC.encode(3.0)
    seen = {lwe.encrypt(keys[0].pk, m, rng(t)).to_bytes() for t in range(20)}
    assert len(seen) == 20


def test_wrong_key_fails_margin(keys):
    r = rng(1)
    for _ in range(100):
        m = CODEC.encode(float(r.uniform(-100, 100)))
        c = lwe.encrypt(keys[0].pk, m, r)
        e = lwe.decrypt_errors(keys[1].sk, c, SMALL, [m.residue])[0]
        assert 2 * abs(e) >= SMALL.delta


def test_instance_mismatch(keys):
    c = lwe.encrypt(keys[0].pk, CODEC.encode(1.0), rng())
    with pytest.raises(InstanceMismatch):
        lwe.decrypt(keys[1], c)
    d = lwe.encrypt(keys[1].pk, CODEC.encode(1.0), rng())
    with pytest.raises(InstanceMismatch):
        lwe.add(c, d, SMALL)


def test_add_examples(keys):
    k = keys[0]
    x = lwe.encrypt(k.pk, CODEC.encode(1.5), rng(1))
    y = lwe.encrypt(k.pk, CODEC.encode(2.25), rng(2))
    assert dec(k, lwe.add(x, y, SMALL)) == 3.75
    assert dec(k, lwe.sub(x, y, SMALL)) == -0.75
    z = lwe.encrypt(k.pk, CODEC.encode(0.0), rng(3))
    assert lwe.decrypt(k, lwe.add(x, z, SMALL)) == lwe.decrypt(k, x)


def test_scale_mismatch(keys):
    x = lwe.encrypt(keys[0].pk, CODEC.encode(1.0), rng())
    with pytest.raises(ScaleMismatch):
        lwe.add(x, lwe.scalar_mul(CODEC.encode(1.0), x, SMALL), SMALL)


def test_scalar_identity_and_negation(keys):
    k = keys[0]
    x = lwe.encrypt(k.pk, CODEC.encode(-6.125), rng())
    one = lwe.scalar_mul(CODEC.encode(1.0), x, SMALL)
    assert one.scale_exp == 2 and abs(dec(k, one) + 6.125) <= 1 / (2 * S)
    neg = lwe.scalar_mul(CODEC.encode(-1.0), x, SMALL)
    assert abs(dec(k, neg) - 6.125) <= 1 / (2 * S)


def test_level_exhausted(keys):
    x = lwe.encrypt(keys[0].pk, CODEC.encode(1.0), rng())
    x = lwe.lift(x.as_vec(), 16, CODEC, SMALL)
    assert x.scale_exp == 16
    with pytest.raises(LevelExhausted):
        lwe.scalar_mul(CODEC.encode(1.0), x, SMALL)


def test_matvec_matches_real_arithmetic(keys):
    k = keys[0]
    r = rng(4)
    M = r.uniform(-1, 1, size=(5, 7))
    v = r.uniform(-10, 10, size=7)
    cv = lwe.encrypt_values(k.pk, CODEC, v, r)
    out = lwe.matvec(CODEC.encode_ints(M), cv, SMALL)
    got = lwe.decrypt_values(k, CODEC, out)
    assert np.max(np.abs(got - M @ v)) <= 2.0 ** -20


def test_correctness_margin_long_chain(keys):
    # 2**10 additions of fresh values, then L - 1 products by constants
    k = keys[0]
    r = rng(5)
    vals = r.uniform(-0.09, 0.09, size=1024)
    cv = lwe.encrypt_values(k.pk, CODEC, vals, r)
    acc = cv[0].as_vec()
    for i in range(1, 1024):
        acc = lwe.add(acc, cv[i].as_vec(), SMALL)
    assert lwe.residue_exact(acc, SMALL)
    exact = sum(CODEC.encode(float(v)).residue for v in vals) % CODEC.q
    assert lwe.decrypt_residues(k.sk, acc, SMALL) == [exact]
    ks = r.uniform(-1, 1, size=CODEC.L - 1)
    for c in ks:
        ek = CODEC.encode(float(c))
        acc = lwe.scalar_mul(ek, acc, SMALL)
        exact = CODEC.centered(ek.residue) * exact % CODEC.q
    assert acc.scale_exp == CODEC.L
    assert lwe.noise_margin_ok(acc, S, SMALL.delta)
    got = lwe.decrypt_residues(k.sk, acc, SMALL)[0]
    assert abs(CODEC.centered(got - exact)) <= acc.max_noise // SMALL.delta + 1
    err = lwe.decrypt_errors(k.sk, acc, SMALL, [exact])[0]
    assert abs(err) <= acc.max_noise


@given(st.floats(-100, 100), st.floats(-100, 100), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_residue_additivity(x, y, seed):
    k = lwe.keygen(SMALL, 0, seed=100)
    r = rng(seed)
    ex, ey = CODEC.encode(x), CODEC.encode(y)
    s = lwe.add(lwe.encrypt(k.pk, ex, r), lwe.encrypt(k.pk, ey, r), SMALL)
    assert lwe.decrypt(k, s).residue == (ex.residue + ey.residue) % CODEC.q
    for e in lwe.decrypt_errors(k.sk, s, SMALL, [(ex.residue + ey.residue) % CODEC.q]):
        assert abs(e) <= s.noise


@given(st.integers(-2 ** 40, 2 ** 40), st.floats(-100, 100), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_scalar_homomorphism(kc, y, seed):
    k = lwe.keygen(SMALL, 0, seed=100)
    ey = CODEC.encode(y)
    c = lwe.scalar_mul(kc, lwe.encrypt(k.pk, ey, rng(seed)), SMALL)
    exact = kc * ey.residue % CODEC.q
    assert within_margin(lwe.decrypt_residues(k.sk, c, SMALL), [exact], c.as_vec())
    if abs(kc) < 2 ** 10:
        assert lwe.residue_exact(c, SMALL)
    assert abs(lwe.decrypt_errors(k.sk, c, SMALL, [exact])[0]) <= c.noise


# key switching -------------------------------------------------------------


def test_star_registry_accepted():
    reg = KeyRegistry([(0, i) for i in range(1, 9)])
    assert lwe.detect_key_cycles(reg.edges) == []


def test_two_cycle_rejected():
    reg = KeyRegistry([(0, 1)])
    with pytest.raises(KeyCycleError):
        reg.register(1, 0)


def test_three_cycle_rejected_at_third():
    reg = KeyRegistry()
    reg.register(0, 1)
    reg.register(1, 2)
    with pytest.raises(KeyCycleError):
        reg.register(2, 0)
    with pytest.raises(KeyCycleError):
        reg.register(3, 3)


def test_detect_cycles_lists():
    assert lwe.detect_key_cycles([]) == []
    assert lwe.detect_key_cycles([(0, 1), (1, 2), (2, 0), (2, 3), (3, 2), (4, 4)]) == \
        [[0, 1, 2], [2, 3], [4]]


@pytest.fixture(scope="module")
def swk(keys):
    return lwe.gen_switch_key(keys[0], keys[1].pk, KeyRegistry(), S, rng(9))


def test_key_switch_round_trip(keys, swk):
    r = rng(10)
    vals = r.uniform(-100, 100, size=100)
    cv = lwe.encrypt_values(keys[0].pk, CODEC, vals, r)
    out = lwe.key_switch(cv, swk, SMALL)
    assert out.instance_id == 1 and out.scale_exp == 2
    assert lwe.noise_margin_ok(out, S, SMALL.delta)
    expected = [CODEC.encode(float(v)).residue * S % CODEC.q for v in vals]
    got = lwe.decrypt_residues(keys[1].sk, out, SMALL)
    assert within_margin(got, expected, out)
    assert np.max(np.abs(lwe.decrypt_values(keys[1], CODEC, out) - vals)) <= 1 / (2 * S)
    errs = lwe.decrypt_errors(keys[1].sk, out, SMALL, expected)
    assert all(abs(e) <= b for e, b in zip(errs, out.noise))


def test_key_switch_zero(keys, swk):
    c = lwe.encrypt(keys[0].pk, CODEC.encode(0.0), rng())
    out = lwe.key_switch(c, swk, SMALL)
    assert within_margin(lwe.decrypt_residues(keys[1].sk, out, SMALL), [0], out.as_vec())
    assert abs(dec(keys[1], out)) <= 1 / (2 * S)


def test_key_switch_wrong_source(keys, swk):
    c = lwe.encrypt(keys[2].pk, CODEC.encode(1.0), rng())
    with pytest.raises(InstanceMismatch):
        lwe.key_switch(c, swk, SMALL)
    twice = lwe.key_switch(lwe.encrypt(keys[0].pk, CODEC.encode(1.0), rng()), swk, SMALL)
    with pytest.raises(InstanceMismatch):
        lwe.key_switch(twice, swk, SMALL)


@pytest.mark.parametrize("base_log", [8, 16, 32, 12])
def test_gadget_bases(base_log):
    p = SchemeParams(n=16, q=CODEC.q, levels=CODEC.L, gadget_base=2 ** base_log)
    a, b = lwe.keygen(p, 0, 1), lwe.keygen(p, 1, 2)
    sw = lwe.gen_switch_key(a, b.pk, KeyRegistry(), S, rng(3))
    r = rng(4)
    vals = r.uniform(-100, 100, size=10)
    out = lwe.key_switch(lwe.encrypt_values(a.pk, CODEC, vals, r), sw, p)
    assert np.max(np.abs(lwe.decrypt_values(b, CODEC, out) - vals)) <= 1 / (2 * S)


def test_gadget_digits_reassemble():
    r = rng(6)
    from encadmm.limbs import from_limbs, random_limbs
    a = random_limbs(r, (2, 3), SMALL.bits)
    D = lwe.gadget_digits(a, SMALL)
    ints = from_limbs(a)
    for i in range(2):
        for k in range(3):
            digits = D[i, k * SMALL.gadget_len:(k + 1) * SMALL.gadget_len]
            assert sum(int(d) << (16 * t) for t, d in enumerate(digits)) == ints[i, k]


# wire formats ---------------------------------------------------------------


def test_wire_round_trip(keys, swk):
    cv = lwe.encrypt_values(keys[0].pk, CODEC, [1.0, -2.0], rng())
    back = lwe.CipherVec.from_bytes(cv.to_bytes(), SMALL)
    assert np.array_equal(back.data, cv.data) and back.noise == cv.noise
    assert back.scale_exp == 1 and back.instance_id == 0
    c = lwe.Ciphertext.from_bytes(cv[1].to_bytes(), SMALL)
    assert dec(keys[0], c) == -2.0
    sb = lwe.SwitchKey.from_bytes(swk.to_bytes(), SMALL)
    assert (sb.from_id, sb.to_id, sb.factor) == (0, 1, S)
    assert np.array_equal(sb.body.data, swk.body.data)


def test_wire_rejects_garbage(keys):
    raw = lwe.encrypt_values(keys[0].pk, CODEC, [1.0], rng()).to_bytes()
    with pytest.raises(WireFormatError):
        lwe.CipherVec.from_bytes(b"XXXX" + raw[4:], SMALL)
    with pytest.raises(WireFormatError):
        lwe.CipherVec.from_bytes(raw + b"\0", SMALL)
    other = SchemeParams(n=16, q=CODEC.q, levels=CODEC.L)
    with pytest.raises(WireFormatError):
        lwe.CipherVec.from_bytes(raw, other)

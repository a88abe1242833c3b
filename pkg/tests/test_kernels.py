import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from encadmm import kernels
from encadmm.limbs import (from_bytes_be, from_limbs, limb_count, random_limbs, to_bytes_be,
                           to_limbs)

BACKENDS = ["numpy"] + (["numba"] if kernels.NUMBA_AVAILABLE else [])


def oracle_lincomb(K, X, bits):
    xs = from_limbs(X)
    mod = 1 << bits
    return [[sum(int(K[r][j]) * int(xs[j, c]) for j in range(len(xs))) % mod
             for c in range(xs.shape[1])] for r in range(len(K))]


def test_limb_round_trip():
    vals = [0, 1, 2 ** 32, 2 ** 100 - 1, -1]
    back = from_limbs(to_limbs(vals, 100))
    assert list(back) == [0, 1, 2 ** 32, 2 ** 100 - 1, 2 ** 100 - 1]
    assert limb_count(416) == 13 and limb_count(33) == 2


def test_bytes_round_trip():
    x = random_limbs(np.random.default_rng(0), (5,), 70)
    assert np.array_equal(from_bytes_be(to_bytes_be(x), 5, 70), x)
    with pytest.raises(ValueError):
        from_bytes_be(b"\xff" * 12, 1, 70)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("bits", [32, 45, 416])
def test_lincomb_oracle(backend, bits):
    rng = np.random.default_rng(bits)
    K = rng.integers(-2 ** 62, 2 ** 62, size=(4, 6))
    X = random_limbs(rng, (6, 3), bits)
    got = from_limbs(kernels.lincomb(K, X, bits, backend=backend))
    assert got.tolist() == oracle_lincomb(K, X, bits)


@pytest.mark.parametrize("backend", BACKENDS)
def test_add_sub_oracle(backend):
    rng = np.random.default_rng(3)
    bits = 393
    X, Y = random_limbs(rng, (7,), bits), random_limbs(rng, (7,), bits)
    x, y = from_limbs(X), from_limbs(Y)
    mod = 1 << bits
    assert from_limbs(kernels.add(X, Y, bits, backend=backend)).tolist() == \
        [(a + b) % mod for a, b in zip(x, y)]
    assert from_limbs(kernels.sub(X, Y, bits, backend=backend)).tolist() == \
        [(a - b) % mod for a, b in zip(x, y)]


def test_large_product_takes_blas_route():
    # above the hand-off threshold both backends share the numpy code
    rng = np.random.default_rng(5)
    bits = 64
    K = rng.integers(-2 ** 20, 2 ** 20, size=(300, 90))
    X = random_limbs(rng, (90, 80), bits)
    assert 300 * 90 * 80 > kernels.HANDOFF_WORK
    a = kernels.lincomb(K, X, bits, backend="numpy")
    sub = oracle_lincomb(K[:3], X[:, :4], bits)
    assert from_limbs(a[:3, :4]).tolist() == sub


def test_lincomb_rejects_bad_input():
    X = to_limbs([[1]], 40)
    with pytest.raises(ValueError):
        kernels.lincomb([[1, 2]], X, 40)
    with pytest.raises(OverflowError):
        kernels.lincomb(np.array([[np.iinfo(np.int64).min]]), X, 40)
    with pytest.raises(ValueError):
        kernels.lincomb([[1]], X, 40, backend="fortran")


@given(st.integers(1, 200), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=40, deadline=None)
def test_backends_agree(bits, seed):
    rng = np.random.default_rng(seed)
    K = rng.integers(-2 ** 62, 2 ** 62, size=(3, 5))
    X = random_limbs(rng, (5, 2), bits)
    ref = oracle_lincomb(K, X, bits)
    for b in BACKENDS:
        assert from_limbs(kernels.lincomb(K, X, bits, backend=b)).tolist() == ref


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", None)])
def test_env_flag_selects_backend(flag, expected):
    import os
    import subprocess
    import sys
    env = dict(os.environ, ENCADMM_NO_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "import encadmm.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True).stdout.strip()
    assert out == (expected or ("numba" if kernels.NUMBA_AVAILABLE else "numpy"))

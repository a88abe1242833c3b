"""Compare the numba and numpy residue kernels on encryption-shaped workloads.

    python3 benchmarks/bench_kernels.py [--bits 416] [--repeat 5]

Shapes mirror the toy preset (n = 256, pk_size = 576): one encryption is a
(1 x 576) subset-sum over public-key rows of n+1 residues; a z-update is a
small dense matrix over ~30 ciphertexts; key switching is the large
digit product that both backends route through BLAS.
"""

import argparse
import timeit

import numpy as np

from encadmm import kernels
from encadmm.limbs import from_limbs, random_limbs


def workloads(bits, rng):
    n1 = 257
    yield "encrypt 16 values", rng.integers(0, 2, (16, 576)), random_limbs(rng, (576, n1), bits)
    yield "z-update 40x80", rng.integers(-2 ** 40, 2 ** 40, (40, 80)), \
        random_limbs(rng, (80, n1), bits)
    yield "lift 32 (diag)", np.diag(rng.integers(-2 ** 23, 2 ** 23, 32)), \
        random_limbs(rng, (32, n1), bits)
    yield "key switch 16", rng.integers(0, 2 ** 16, (16, 256 * 26)), \
        random_limbs(rng, (256 * 26, n1), bits)


def best(fn, repeat):
    fn()  # warm-up, includes jit compilation
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bits", type=int, default=416)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = ["numpy"] + (["numba"] if kernels.NUMBA_AVAILABLE else [])
    print(f"modulus 2^{args.bits}, backends {backends}, default {kernels.BACKEND}")
    print(f"{'workload':<20}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, K, X in workloads(args.bits, rng):
        times = {}
        outs = {}
        for b in backends:
            times[b] = best(lambda: kernels.lincomb(K, X, args.bits, backend=b), args.repeat)
            outs[b] = kernels.lincomb(K, X, args.bits, backend=b)
        if len(backends) == 2:
            # identical residues from both paths
            assert np.array_equal(outs["numpy"], outs["numba"])
        ratio = times["numpy"] / times.get("numba", times["numpy"])
        print(f"{name:<20}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
              + f"{ratio:>9.2f}x")
    X, Y = random_limbs(rng, (4096,), args.bits), random_limbs(rng, (4096,), args.bits)
    t = {b: best(lambda: kernels.add(X, Y, args.bits, backend=b), args.repeat) for b in backends}
    ref = from_limbs(kernels.add(X, Y, args.bits, backend="numpy"))
    for b in backends:
        assert (from_limbs(kernels.add(X, Y, args.bits, backend=b)) == ref).all()
    print(f"{'add 4096':<20}" + "".join(f"{t[b] * 1e3:>10.2f}ms" for b in backends)
          + f"{t['numpy'] / t.get('numba', t['numpy']):>9.2f}x")


if __name__ == "__main__":
    main()

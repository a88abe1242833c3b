"""Leveled additively homomorphic public-key encryption from plain LWE.

One ciphertext carries one residue ``m`` of the plaintext ring ``Z_q``.
Ciphertexts live modulo ``Q = delta * q`` with ``delta = 2**delta_bits``::

    (a, b)  with  b - <a, sk> = delta * m + e   (mod Q)

where ``e`` is a small error.  Because ``Q`` is a multiple of ``q``, products
with plaintext integers stay exact modulo ``q``, and decryption rounds
``e / delta`` away: it is exact at the residue level while ``|e| < delta/2``.  Supported homomorphisms are addition,
subtraction, multiplication by a plaintext integer (``scalar_mul``/``matvec``)
and key switching between instances.  Messages are fixed-point encodings
(:mod:`encadmm.fixedpoint`); once the error outgrows ``delta`` it perturbs the
low-order bits of the scaled value.  ``Ciphertext.noise`` is a worst-case
bound on ``|e|`` that is carried along every operation.

Ciphertexts of one vector share an instance and a scale exponent and are
stored together as a :class:`CipherVec`; :class:`Ciphertext` is the scalar
view used by the single-value API.

Wire format (all integers big-endian)::

    Ciphertext: b"LWEC" | u8 version=1 | u32 instance_id | u16 scale_exp
                | u32 n | u16 width | u16 noise_len | noise (noise_len bytes)
                | n+1 residues of ``width`` bytes each (a_0 .. a_{n-1}, b)
    CipherVec:  b"LWEV" | u8 version=1 | u32 count | count Ciphertext records,
                each prefixed by its u32 byte length

``width`` is ``4 * ceil(log2(Q) / 32)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .fixedpoint import FpCodec, FpValue, LevelExhausted, ScaleMismatch
from .limbs import (from_bytes_be, from_limbs, limb_count, limbs_to_int, random_limbs,
                    to_bytes_be, to_limbs, top_mask)


class HEError(ValueError):
    pass


class InstanceMismatch(HEError):
    pass


class KeyCycleError(HEError):
    pass


class WireFormatError(HEError):
    pass


@dataclass(frozen=True)
class SchemeParams:
    """Scheme parameters; the plaintext modulus ``q`` must be a power of two."""

    n: int
    q: int
    levels: int
    noise_width: int = 8
    gadget_base: int = 2 ** 16
    pk_size: int | None = None
    label: str = "custom"
    # extra ciphertext-only factor; 23 bits fit the standard codec in 13 limbs
    delta_bits: int = 23

    def __post_init__(self):
        if self.n < 1:
            raise HEError("secret dimension must be positive")
        if self.q < 2 or self.q & (self.q - 1):
            raise HEError("the in-repo scheme needs a power-of-two modulus")
        b = self.gadget_base
        if b < 2 or b & (b - 1) or b > 2 ** 32:
            raise HEError("gadget base must be a power of two in [2, 2**32]")
        if self.noise_width < 0:
            raise HEError("noise width must be non-negative")
        if self.delta_bits < 0:
            raise HEError("delta_bits must be non-negative")
        if self.pk_size is None:
            object.__setattr__(self, "pk_size", 2 * self.n + 64)
        if self.gadget_len * self.gadget_log < self.bits:
            raise HEError("gadget does not cover the modulus")

    @classmethod
    def toy(cls, codec: FpCodec, **kw) -> "SchemeParams":
        """n = 2**8, labeled 'toy'; no security claim beyond the label."""
        return cls(n=2 ** 8, q=codec.q, levels=codec.L, label="toy", **kw)

    @classmethod
    def small(cls, codec: FpCodec, **kw) -> "SchemeParams":
        """n = 2**13, labeled 'small'; key material is far beyond desk-scale memory."""
        return cls(n=2 ** 13, q=codec.q, levels=codec.L, label="small", **kw)

    @property
    def plain_bits(self) -> int:
        return self.q.bit_length() - 1

    @property
    def bits(self) -> int:
        """``log2(Q)``, the width every ciphertext residue is reduced to."""
        return self.plain_bits + self.delta_bits

    @property
    def delta(self) -> int:
        return 1 << self.delta_bits

    @property
    def Q(self) -> int:
        return self.q << self.delta_bits

    @property
    def limbs(self) -> int:
        return limb_count(self.bits)

    @property
    def gadget_log(self) -> int:
        return self.gadget_base.bit_length() - 1

    @property
    def gadget_len(self) -> int:
        return math.ceil(self.bits / self.gadget_log)

    def centered(self, r: int) -> int:
        r %= self.q
        return r - self.q if r > self.q // 2 else r


# ---------------------------------------------------------------------------
# ciphertext containers


@dataclass(frozen=True, eq=False)
class CipherVec:
    """A vector of ciphertexts under one instance at one scale exponent."""

    data: np.ndarray  # (m, n+1, L) uint32, last row of axis 1 is b
    instance_id: int
    scale_exp: int
    noise: tuple[int, ...]

    def __post_init__(self):
        if self.data.ndim != 3 or len(self.noise) != self.data.shape[0]:
            raise HEError("malformed ciphertext vector")

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Ciphertext(self.data[idx], self.instance_id, self.scale_exp, self.noise[idx])
        sel = np.arange(len(self))[idx]
        return CipherVec(self.data[sel], self.instance_id, self.scale_exp,
                         tuple(self.noise[i] for i in sel))

    @property
    def n(self) -> int:
        return self.data.shape[1] - 1

    @property
    def max_noise(self) -> int:
        return max(self.noise, default=0)

    @staticmethod
    def concat(parts: Sequence["CipherVec"]) -> "CipherVec":
        if not parts:
            raise HEError("nothing to concatenate")
        first = parts[0]
        for p in parts[1:]:
            _check_compatible(first, p)
        return CipherVec(np.concatenate([p.data for p in parts]), first.instance_id,
                         first.scale_exp, tuple(x for p in parts for x in p.noise))

    @staticmethod
    def stack(cts: Sequence["Ciphertext"]) -> "CipherVec":
        return CipherVec.concat([c.as_vec() for c in cts])

    def to_bytes(self) -> bytes:
        out = [b"LWEV", struct.pack(">BI", 1, len(self))]
        for i in range(len(self)):
            rec = self[i].to_bytes()
            out.append(struct.pack(">I", len(rec)))
            out.append(rec)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes, params: SchemeParams) -> "CipherVec":
        if raw[:4] != b"LWEV" or len(raw) < 9:
            raise WireFormatError("not a ciphertext vector")
        version, count = struct.unpack(">BI", raw[4:9])
        if version != 1:
            raise WireFormatError(f"unsupported version {version}")
        pos = 9
        cts = []
        for _ in range(count):
            (size,) = struct.unpack(">I", raw[pos:pos + 4])
            cts.append(Ciphertext.from_bytes(raw[pos + 4:pos + 4 + size], params))
            pos += 4 + size
        if pos != len(raw):
            raise WireFormatError("trailing bytes")
        if not cts:
            raise WireFormatError("empty ciphertext vector")
        return cls.stack(cts)


@dataclass(frozen=True, eq=False)
class Ciphertext:
    data: np.ndarray  # (n+1, L) uint32
    instance_id: int
    scale_exp: int
    noise: int

    @property
    def a(self) -> list[int]:
        return list(from_limbs(self.data[:-1]))

    @property
    def b(self) -> int:
        return limbs_to_int(self.data[-1])

    def as_vec(self) -> CipherVec:
        return CipherVec(self.data[None], self.instance_id, self.scale_exp, (self.noise,))

    def to_bytes(self) -> bytes:
        n1, L = self.data.shape
        noise = self.noise.to_bytes(max(1, (self.noise.bit_length() + 7) // 8), "big")
        head = b"LWEC" + struct.pack(">BIHIHH", 1, self.instance_id, self.scale_exp,
                                     n1 - 1, 4 * L, len(noise))
        return head + noise + to_bytes_be(self.data)

    @classmethod
    def from_bytes(cls, raw: bytes, params: SchemeParams) -> "Ciphertext":
        hlen = 4 + struct.calcsize(">BIHIHH")
        if raw[:4] != b"LWEC" or len(raw) < hlen:
            raise WireFormatError("not a ciphertext")
        version, inst, scale, n, width, nlen = struct.unpack(">BIHIHH", raw[4:hlen])
        if version != 1:
            raise WireFormatError(f"unsupported version {version}")
        if n != params.n or width != 4 * params.limbs:
            raise WireFormatError("ciphertext does not match scheme parameters")
        noise = int.from_bytes(raw[hlen:hlen + nlen], "big")
        try:
            data = from_bytes_be(raw[hlen + nlen:], n + 1, params.bits)
        except ValueError as exc:
            raise WireFormatError(str(exc)) from exc
        return cls(data, inst, scale, noise)


def _check_compatible(x: CipherVec, y: CipherVec) -> None:
    if x.instance_id != y.instance_id:
        raise InstanceMismatch(f"instance {x.instance_id} != {y.instance_id}")
    if x.scale_exp != y.scale_exp:
        raise ScaleMismatch(f"scale_exp {x.scale_exp} != {y.scale_exp}")
    if x.data.shape[1:] != y.data.shape[1:]:
        raise HEError("ciphertext dimensions differ")


def _vec(x) -> tuple[CipherVec, bool]:
    if isinstance(x, Ciphertext):
        return x.as_vec(), True
    return x, False


def _out(v: CipherVec, scalar: bool):
    return v[0] if scalar else v


# ---------------------------------------------------------------------------
# keys


@dataclass(frozen=True, eq=False)
class PublicKey:
    instance_id: int
    params: SchemeParams
    data: np.ndarray  # (pk_size, n+1, L) encryptions of zero
    row_noise: int    # bound on |e| of every row


@dataclass(frozen=True, eq=False)
class InstanceKeys:
    instance_id: int
    params: SchemeParams
    sk: np.ndarray  # (n, L) uniform residues
    pk: PublicKey

    def public(self) -> PublicKey:
        return self.pk


def _rng(seed, *extra) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, extra)]))


def inner_products(A: np.ndarray, sk: np.ndarray, bits: int) -> np.ndarray:
    """``<A[r], sk> mod 2**bits`` for every row of ``A`` (shape ``(rows, n, L)``)."""
    rows, n, L = A.shape
    At = np.ascontiguousarray(A.transpose(1, 0, 2))
    acc = np.zeros((rows, L), dtype=np.uint32)
    for i in range(L):
        digit = sk[:, i].astype(np.int64)[None, :]
        part = kernels.lincomb(digit, At, bits)[0]
        if i:
            shifted = np.zeros_like(part)
            shifted[:, i:] = part[:, :L - i]
            shifted[:, -1] &= np.uint32(top_mask(bits))
            part = shifted
        acc = kernels.add(acc, part, bits)
    return acc


def keygen(params: SchemeParams, instance_id: int, seed: int) -> InstanceKeys:
    """Uniform secret and ``pk_size`` public encryptions of zero; deterministic in ``seed``."""
    rng = _rng(seed, instance_id, 0x6B6579)
    sk = random_limbs(rng, (params.n,), params.bits)
    A = random_limbs(rng, (params.pk_size, params.n), params.bits)
    w = params.noise_width
    e = rng.integers(-w, w + 1, size=params.pk_size)
    b = kernels.add(inner_products(A, sk, params.bits), to_limbs(e.astype(object), params.bits),
                    params.bits)
    data = np.concatenate([A, b[:, None, :]], axis=1)
    return InstanceKeys(instance_id, params, sk, PublicKey(instance_id, params, data, w))


# ---------------------------------------------------------------------------
# encryption / decryption


def encrypt_residues(pk: PublicKey, residues: Iterable[int], scale_exp: int,
                     rng: np.random.Generator, raw: bool = False) -> CipherVec:
    """Random subset sums of the public key plus ``(0, delta * m)``.

    With ``raw=True`` the values are added modulo ``Q`` without the ``delta``
    factor; switch keys are built this way.
    """
    p = pk.params
    if raw:
        res = np.array([int(r) % p.Q for r in residues], dtype=object)
    else:
        res = np.array([(int(r) % p.q) << p.delta_bits for r in residues], dtype=object)
    R = rng.integers(0, 2, size=(len(res), p.pk_size))
    data = kernels.lincomb(R, pk.data, p.bits)
    data[:, -1] = kernels.add(data[:, -1], to_limbs(res, p.bits), p.bits)
    noise = tuple(int(c) * pk.row_noise for c in R.sum(axis=1))
    return CipherVec(data, pk.instance_id, scale_exp, noise)


def encrypt(pk: PublicKey, m: FpValue, rng: np.random.Generator) -> Ciphertext:
    return encrypt_residues(pk, [m.residue], m.scale_exp, rng)[0]


def encrypt_values(pk: PublicKey, codec: FpCodec, values, rng: np.random.Generator) -> CipherVec:
    """Encode reals at scale ``S`` and encrypt them."""
    return encrypt_residues(pk, [codec.encode(float(v)).residue for v in np.ravel(values)],
                            1, rng)


def _phases(sk: np.ndarray, x, params: SchemeParams) -> list[int]:
    """Centered ``b - <a, sk> mod Q`` for each ciphertext."""
    v, _ = _vec(x)
    ip = inner_products(np.ascontiguousarray(v.data[:, :-1]), sk, params.bits)
    Q = params.Q
    return [r - Q if r > Q // 2 else r
            for r in map(int, from_limbs(kernels.sub(v.data[:, -1], ip, params.bits)))]


def decrypt_residues(sk: np.ndarray, x, params: SchemeParams) -> list[int]:
    """Plaintext residues in ``[0, q)``: the phase divided by ``delta``, rounded."""
    half = params.delta >> 1
    return [((ph + half) >> params.delta_bits) % params.q for ph in _phases(sk, x, params)]


def decrypt_errors(sk: np.ndarray, x, params: SchemeParams, residues=None) -> list[int]:
    """Actual errors ``e``, given the true plaintext residues (default: the decrypted ones).

    Meant for tests of the noise bounds; nothing in a run calls it.
    """
    res = decrypt_residues(sk, x, params) if residues is None else residues
    Q = params.Q
    out = []
    for ph, m in zip(_phases(sk, x, params), res):
        e = (ph - ((int(m) % params.q) << params.delta_bits)) % Q
        out.append(e - Q if e > Q // 2 else e)
    return out


def decrypt(keys: InstanceKeys, ct: Ciphertext) -> FpValue:
    if ct.instance_id != keys.instance_id:
        raise InstanceMismatch(f"ciphertext of instance {ct.instance_id}, key {keys.instance_id}")
    return FpValue(decrypt_residues(keys.sk, ct, keys.params)[0], ct.scale_exp)


def decrypt_values(keys: InstanceKeys, codec: FpCodec, v: CipherVec) -> np.ndarray:
    if v.instance_id != keys.instance_id:
        raise InstanceMismatch(f"ciphertext of instance {v.instance_id}, key {keys.instance_id}")
    return codec.decode_ints(decrypt_residues(keys.sk, v, keys.params), v.scale_exp)


def noise_margin_ok(x, S: int, delta: int = 1) -> bool:
    """Correctness margin: ``2 * noise < delta * S**scale_exp``.

    The decoded value is then off by less than half a unit of ``S**-1``
    (besides rounding).  The margin is invariant under multiplication by
    encoded constants of magnitude at most one.
    """
    v, _ = _vec(x)
    return 2 * v.max_noise < delta * S ** v.scale_exp


def residue_exact(x, params: SchemeParams) -> bool:
    """Whether the noise bound guarantees exact decryption (``2 * noise < delta``)."""
    v, _ = _vec(x)
    return 2 * v.max_noise < params.delta


# ---------------------------------------------------------------------------
# homomorphic operations


def add(x, y, params: SchemeParams):
    """Componentwise sum; noise bounds add."""
    (vx, sx), (vy, _) = _vec(x), _vec(y)
    _check_compatible(vx, vy)
    data = kernels.add(vx.data, vy.data, params.bits)
    return _out(CipherVec(data, vx.instance_id, vx.scale_exp,
                          tuple(a + b for a, b in zip(vx.noise, vy.noise))), sx)


def sub(x, y, params: SchemeParams):
    (vx, sx), (vy, _) = _vec(x), _vec(y)
    _check_compatible(vx, vy)
    data = kernels.sub(vx.data, vy.data, params.bits)
    return _out(CipherVec(data, vx.instance_id, vx.scale_exp,
                          tuple(a + b for a, b in zip(vx.noise, vy.noise))), sx)


def scalar_mul(k: FpValue | int, x, params: SchemeParams):
    """Multiply every entry by one plaintext constant (taken centered); one level consumed.

    An :class:`FpValue` is used through its centered residue; a plain ``int``
    is taken as the signed multiplier itself.
    """
    vx, sx = _vec(x)
    kc = params.centered(k.residue) if isinstance(k, FpValue) else int(k)
    if abs(kc) >= 2 ** 63:
        raise OverflowError("multiplier does not fit in 64 bits")
    K = np.zeros((len(vx), len(vx)), dtype=np.int64)
    np.fill_diagonal(K, kc)
    return _out(matvec(K, vx, params), sx)


def matvec(K, x: CipherVec, params: SchemeParams) -> CipherVec:
    """``K (.) x`` for an integer matrix of encoded constants; one level consumed.

    Row ``r`` of the result is ``sum_j K[r, j] * x[j]`` computed directly on
    residues, with noise bound ``sum_j |K[r, j]| * noise[j]``.
    """
    K = np.asarray(K, dtype=np.int64)
    if K.ndim != 2 or K.shape[1] != len(x):
        raise HEError(f"matrix shape {K.shape} does not match vector length {len(x)}")
    e = x.scale_exp + 1
    if e > params.levels:
        raise LevelExhausted(f"scale_exp {e} exceeds L={params.levels}")
    data = kernels.lincomb(K, x.data, params.bits)
    absK = np.abs(K.astype(object))
    noise = tuple(int(v) for v in absK.dot(np.array(x.noise, dtype=object)))
    return CipherVec(data, x.instance_id, e, noise)


def lift(x: CipherVec, target: int, codec: FpCodec, params: SchemeParams) -> CipherVec:
    """Raise the scale exponent to ``target`` by repeated products with encoded 1."""
    one = codec.encode(1.0)
    while x.scale_exp < target:
        x = scalar_mul(one, x, params)
    return x


# ---------------------------------------------------------------------------
# key switching


@dataclass(frozen=True, eq=False)
class SwitchKey:
    """Gadget encryptions ``Enc_to(factor * sk_from[k] * base**t)``.

    ``factor`` is the codec scale ``S``: a switch multiplies the message by
    it, which is why key switching consumes one level.
    """

    from_id: int
    to_id: int
    factor: int
    body: CipherVec  # n * gadget_len ciphertexts under instance to_id, k-major

    def to_bytes(self) -> bytes:
        return b"SWKY" + struct.pack(">BIIQ", 1, self.from_id, self.to_id, self.factor) \
            + self.body.to_bytes()

    @classmethod
    def from_bytes(cls, raw: bytes, params: SchemeParams) -> "SwitchKey":
        hlen = 4 + struct.calcsize(">BIIQ")
        if raw[:4] != b"SWKY" or len(raw) < hlen:
            raise WireFormatError("not a switch key")
        version, frm, to, factor = struct.unpack(">BIIQ", raw[4:hlen])
        if version != 1:
            raise WireFormatError(f"unsupported version {version}")
        body = CipherVec.from_bytes(raw[hlen:], params)
        if len(body) != params.n * params.gadget_len or body.instance_id != to:
            raise WireFormatError("switch key body does not match header")
        return cls(frm, to, factor, body)


class KeyRegistry:
    """Directed graph of issued switch keys ``from_id -> to_id``."""

    def __init__(self, edges: Iterable[tuple[int, int]] = ()):
        self.edges: list[tuple[int, int]] = []
        for e in edges:
            self.register(*e)

    def would_cycle(self, from_id: int, to_id: int) -> bool:
        return bool(detect_key_cycles(self.edges + [(from_id, to_id)]))

    def register(self, from_id: int, to_id: int) -> None:
        if from_id == to_id:
            raise KeyCycleError(f"switch key {from_id}->{to_id} encrypts a key under itself")
        if self.would_cycle(from_id, to_id):
            raise KeyCycleError(f"switch key {from_id}->{to_id} closes a key cycle")
        self.edges.append((from_id, to_id))


def detect_key_cycles(edges: Iterable[tuple[int, int]]) -> list[list[int]]:
    """Elementary cycles of the directed key graph, each rotated to start at its smallest id.

    A key ``Enc_j(sk_i)`` is the edge ``i -> j``; a cycle is a closed chain of
    such encryptions.  Self-loops count as cycles of length one.
    """
    adj: dict[int, set[int]] = {}
    for i, j in edges:
        adj.setdefault(i, set()).add(j)
        adj.setdefault(j, set())
    cycles = []
    for start in sorted(adj):
        # paths that only visit nodes >= start report each cycle once
        stack = [(start, iter(sorted(adj[start])))]
        path = [start]
        on_path = {start}
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                on_path.discard(path.pop())
                continue
            if nxt == start:
                cycles.append(list(path))
            elif nxt > start and nxt not in on_path:
                path.append(nxt)
                on_path.add(nxt)
                stack.append((nxt, iter(sorted(adj[nxt]))))
    return cycles


def gen_switch_key(sk_from: InstanceKeys, pk_to: PublicKey, registry: KeyRegistry,
                   factor: int, rng: np.random.Generator) -> SwitchKey:
    p = sk_from.params
    registry.register(sk_from.instance_id, pk_to.instance_id)
    s = from_limbs(sk_from.sk)
    base = p.gadget_base
    msgs = [factor * int(s[k]) * base ** t for k in range(p.n) for t in range(p.gadget_len)]
    body = encrypt_residues(pk_to, msgs, 0, rng, raw=True)
    return SwitchKey(sk_from.instance_id, pk_to.instance_id, factor, body)


def gadget_digits(a: np.ndarray, params: SchemeParams) -> np.ndarray:
    """Base-``gadget_base`` digits of residues ``a`` (shape ``(m, n, L)``) -> ``(m, n*len)``."""
    m, n, L = a.shape
    w = params.gadget_log
    if w in (8, 16, 32):
        view = np.ascontiguousarray(a).view({8: np.uint8, 16: np.uint16, 32: np.uint32}[w])
        digits = view[:, :, :params.gadget_len]
    else:
        ints = from_limbs(a)
        mask = params.gadget_base - 1
        digits = np.array([[[(int(v) >> (w * t)) & mask for t in range(params.gadget_len)]
                            for v in row] for row in ints], dtype=np.int64)
    return digits.astype(np.int64).reshape(m, n * params.gadget_len)


def key_switch(x, swk: SwitchKey, params: SchemeParams):
    """Re-encrypt from instance ``swk.from_id`` to ``swk.to_id``; one level consumed.

    ``(0, factor*b) - sum_{k,t} digit_t(a_k) * swk[k, t]`` decrypts under the
    target key to ``factor*(delta*m + e) - sum digit * e'``.
    """
    v, scalar = _vec(x)
    if v.instance_id != swk.from_id:
        raise InstanceMismatch(f"ciphertext of instance {v.instance_id}, switch key from "
                               f"{swk.from_id}")
    e = v.scale_exp + 1
    if e > params.levels:
        raise LevelExhausted(f"scale_exp {e} exceeds L={params.levels}")
    D = gadget_digits(v.data[:, :-1], params)
    mixed = kernels.lincomb(D, swk.body.data, params.bits)
    m = len(v)
    scaled_b = kernels.lincomb(np.eye(m, dtype=np.int64) * swk.factor, v.data[:, -1:, :],
                               params.bits)
    head = np.zeros_like(mixed)
    head[:, -1:] = scaled_b
    data = kernels.sub(head, mixed, params.bits)
    extra = params.n * params.gadget_len * (params.gadget_base - 1) * swk.body.max_noise
    noise = tuple(swk.factor * nz + extra for nz in v.noise)
    return _out(CipherVec(data, swk.to_id, e, noise), scalar)

"""Authenticated symmetric channels between neighboring parties.

Every edge ``{a, b}`` (party 0 is the operator) has one 256-bit key, derived
deterministically from a scenario seed with HKDF-SHA256.  Messages are sealed
with ChaCha20-Poly1305; the header is bound as associated data.

SealedMessage layout (big-endian)::

    b"SEAL" | u8 version=1 | header | nonce (12) | u32 len | ciphertext||tag
    header = u32 sender | u32 receiver | u64 round | u8 kind
    nonce  = u8 direction | 3 zero bytes | u64 counter

``direction`` is 0 when the lower id sends and 1 otherwise, so the two
directions of an edge never share a nonce.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

_HEADER = struct.Struct(">IIQB")
_NONCE = struct.Struct(">B3xQ")
MAGIC = b"SEAL"


class ChannelError(ValueError):
    pass


class AuthFailure(ChannelError):
    pass


@dataclass(eq=False)
class ChannelKey:
    edge: tuple[int, int]
    key: bytes
    counters: dict[int, int] = field(default_factory=lambda: {0: 0, 1: 0})

    def direction(self, sender: int, receiver: int) -> int:
        a, b = self.edge
        if (sender, receiver) == (a, b):
            return 0
        if (sender, receiver) == (b, a):
            return 1
        raise ChannelError(f"{sender}->{receiver} is not a direction of edge {self.edge}")


def establish(edge: tuple[int, int], seed: int) -> ChannelKey:
    a, b = sorted(int(v) for v in edge)
    if a == b:
        raise ChannelError("a channel needs two distinct endpoints")
    hk = HKDF(algorithm=hashes.SHA256(), length=32, salt=b"encadmm-channel-v1",
              info=f"edge:{a}-{b}".encode())
    key = hk.derive(int(seed).to_bytes(16, "big", signed=True))
    return ChannelKey((a, b), key)


@dataclass(frozen=True)
class Header:
    sender: int
    receiver: int
    round: int
    kind: int

    def pack(self) -> bytes:
        return _HEADER.pack(self.sender, self.receiver, self.round, self.kind)


@dataclass(frozen=True)
class SealedMessage:
    header: Header
    nonce: bytes
    body: bytes  # ciphertext followed by the 16-byte tag

    def to_bytes(self) -> bytes:
        return (MAGIC + bytes([1]) + self.header.pack() + self.nonce
                + struct.pack(">I", len(self.body)) + self.body)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedMessage":
        h0 = 5
        h1 = h0 + _HEADER.size
        n1 = h1 + 12
        if raw[:4] != MAGIC or len(raw) < n1 + 4 or raw[4] != 1:
            raise ChannelError("not a sealed message")
        (size,) = struct.unpack(">I", raw[n1:n1 + 4])
        body = raw[n1 + 4:]
        if len(body) != size:
            raise ChannelError("truncated sealed message")
        return cls(Header(*_HEADER.unpack(raw[h0:h1])), raw[h1:n1], body)


def seal(k: ChannelKey, payload: bytes, header: Header) -> SealedMessage:
    d = k.direction(header.sender, header.receiver)
    ctr = k.counters[d]
    if ctr >= 2 ** 64 - 1:
        raise ChannelError("nonce space exhausted")
    k.counters[d] = ctr + 1
    nonce = _NONCE.pack(d, ctr)
    body = ChaCha20Poly1305(k.key).encrypt(nonce, bytes(payload), header.pack())
    return SealedMessage(header, nonce, body)


def open_sealed(k: ChannelKey, m: SealedMessage) -> bytes:
    try:
        d = k.direction(m.header.sender, m.header.receiver)
    except ChannelError as exc:
        raise AuthFailure(str(exc)) from None
    if len(m.nonce) != 12 or m.nonce[0] != d:
        raise AuthFailure("nonce direction does not match header")
    try:
        return ChaCha20Poly1305(k.key).decrypt(m.nonce, m.body, m.header.pack())
    except InvalidTag:
        raise AuthFailure("authentication failed") from None


# ``open`` mirrors ``seal``; exported under a name that does not shadow the builtin
open_message = open_sealed

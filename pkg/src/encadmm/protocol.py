"""Encrypted distributed ADMM between agents and an operator.

Party 0 is the operator and owns the only secret key of cryptosystem
instance 0.  Every iterate (local variables, duals, averaged entries,
parameters) lives as instance-0 ciphertexts; agents hold their own
plaintext KKT blocks and apply them to ciphertexts as encoded constants.
At the end of a time step each agent obtains its block ``alpha_i`` through a
key switch ``0 -> i`` performed by a delegate neighbor, the only party
holding that switch key.

All traffic goes through a :class:`Transport`: per-link FIFO queues,
round tags that increase strictly per link, and a structured log.  Payloads
travel sealed with the link's channel key, except the key-switched reply,
which is already encrypted under the recipient's own instance.

Frame layout (big-endian)::

    b"PMSG" | u8 version=1 | u8 kind | u32 sender | u32 receiver | u64 round
            | u8 sealed | u32 len | body

``body`` is a :class:`~encadmm.channel.SealedMessage` when ``sealed`` is 1,
otherwise the payload itself.  Payloads by kind:

    InitAlphaShare, ZShare, ZetaShare:  u32 count | count * u32 k | CipherVec
    DeltaParam, FinalSwitchRequest,
    FinalSwitchResponse:                CipherVec
    SwitchKeyDelivery:                  u32 subject | SwitchKey
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable, Mapping

import numpy as np

from . import lwe
from .admm import AdmmParams, GammaBlocks, build_schedule, precompute_gamma
from .channel import ChannelKey, Header, SealedMessage, establish, open_sealed, seal
from .fixedpoint import FpCodec
from .graph import responsibility_sets
from .problem import ConsensusProblem


class ProtocolError(RuntimeError):
    pass


class Kind(IntEnum):
    INIT_ALPHA_SHARE = 1
    Z_SHARE = 2
    ZETA_SHARE = 3
    DELTA_PARAM = 4
    SWITCH_KEY_DELIVERY = 5
    FINAL_SWITCH_REQUEST = 6
    FINAL_SWITCH_RESPONSE = 7


KIND_NAMES = {
    Kind.INIT_ALPHA_SHARE: "InitAlphaShare",
    Kind.Z_SHARE: "ZShare",
    Kind.ZETA_SHARE: "ZetaShare",
    Kind.DELTA_PARAM: "DeltaParam",
    Kind.SWITCH_KEY_DELIVERY: "SwitchKeyDelivery",
    Kind.FINAL_SWITCH_REQUEST: "FinalSwitchRequest",
    Kind.FINAL_SWITCH_RESPONSE: "FinalSwitchResponse",
}
SHARE_KINDS = (Kind.INIT_ALPHA_SHARE, Kind.Z_SHARE, Kind.ZETA_SHARE)
ITERATE_KINDS = SHARE_KINDS + (Kind.FINAL_SWITCH_REQUEST, Kind.FINAL_SWITCH_RESPONSE)
OPERATOR = 0

_FRAME = struct.Struct(">4sBBIIQBI")


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class ProtocolMessage:
    kind: Kind
    sender: int
    receiver: int
    round: int
    sealed: bool
    body: bytes

    def to_bytes(self) -> bytes:
        return _FRAME.pack(b"PMSG", 1, int(self.kind), self.sender, self.receiver, self.round,
                           int(self.sealed), len(self.body)) + self.body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ProtocolMessage":
        if len(raw) < _FRAME.size:
            raise ProtocolError("truncated frame")
        magic, ver, kind, s, r, rnd, sealed, size = _FRAME.unpack(raw[:_FRAME.size])
        if magic != b"PMSG" or ver != 1:
            raise ProtocolError("not a protocol frame")
        body = raw[_FRAME.size:]
        if len(body) != size:
            raise ProtocolError("frame length mismatch")
        return cls(Kind(kind), s, r, rnd, bool(sealed), body)

    @property
    def name(self) -> str:
        return KIND_NAMES[self.kind]


def pack_shares(ks: Iterable[int], vec: lwe.CipherVec) -> bytes:
    ks = list(ks)
    if len(ks) != len(vec):
        raise ProtocolError("index list and ciphertexts differ in length")
    return struct.pack(f">I{len(ks)}I", len(ks), *ks) + vec.to_bytes()


def unpack_shares(raw: bytes, params: lwe.SchemeParams) -> tuple[list[int], lwe.CipherVec]:
    (count,) = struct.unpack(">I", raw[:4])
    ks = list(struct.unpack(f">{count}I", raw[4:4 + 4 * count]))
    vec = lwe.CipherVec.from_bytes(raw[4 + 4 * count:], params)
    if len(vec) != count:
        raise ProtocolError("share count mismatch")
    return ks, vec


def pack_switch_key(subject: int, swk: lwe.SwitchKey) -> bytes:
    return struct.pack(">I", subject) + swk.to_bytes()


def switch_key_header(raw: bytes) -> tuple[int, int, int]:
    """``(subject, from_id, to_id)`` without parsing the key body."""
    (subject,) = struct.unpack(">I", raw[:4])
    body = raw[4:]
    if body[:4] != b"SWKY":
        raise ProtocolError("not a switch key")
    _, frm, to, _ = struct.unpack(">BIIQ", body[4:4 + struct.calcsize(">BIIQ")])
    return subject, frm, to


# ---------------------------------------------------------------------------
# transport


class Transport:
    """Deterministic in-process message queues with a structured log.

    ``observers`` are called with every frame at send time (the online
    auditor hooks in here); ``keep_frames`` retains frames for an offline
    :func:`audit_trace`.
    """

    def __init__(self, keep_frames: bool = True):
        self.queues: dict[tuple[int, int], deque] = defaultdict(deque)
        self.last_tag: dict[tuple[int, int], int] = {}
        self._round = 0
        self.log: list[dict] = []
        self.frames: list[ProtocolMessage] = []
        self.keep_frames = keep_frames
        self.observers: list[Callable[[ProtocolMessage], None]] = []

    def new_round(self) -> int:
        self._round += 1
        return self._round

    def send(self, msg: ProtocolMessage) -> None:
        link = (msg.sender, msg.receiver)
        if msg.sender == msg.receiver:
            raise ProtocolError("a party cannot message itself")
        if msg.round <= self.last_tag.get(link, 0):
            raise ProtocolError(f"round tag {msg.round} not increasing on link {link}")
        self.last_tag[link] = msg.round
        raw = msg.to_bytes()
        self.queues[link].append(msg)
        self.log.append({"seq": len(self.log), "round": msg.round, "kind": msg.name,
                         "sender": msg.sender, "receiver": msg.receiver,
                         "sealed": msg.sealed, "bytes": len(raw),
                         "sha256": hashlib.sha256(raw).hexdigest()})
        if self.keep_frames:
            self.frames.append(msg)
        for obs in self.observers:
            obs(msg)

    def recv(self, receiver: int, sender: int, kind: Kind | None = None) -> ProtocolMessage:
        q = self.queues.get((sender, receiver))
        if not q:
            raise ProtocolError(f"no message from {sender} to {receiver}")
        msg = q.popleft()
        if kind is not None and msg.kind != kind:
            raise ProtocolError(f"expected {KIND_NAMES[kind]} from {sender}, got {msg.name}")
        return msg

    def note(self, event: str, **info) -> None:
        """Non-message log entry (e.g. use of the test-only oracle)."""
        self.log.append({"seq": len(self.log), "event": event, **info})

    def pending(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def assert_drained(self) -> None:
        if self.pending():
            left = [k for k, q in self.queues.items() if q]
            raise ProtocolError(f"undelivered messages on links {left[:5]}")

    def log_lines(self) -> list[str]:
        return [json.dumps(e, sort_keys=True) for e in self.log]

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.log_lines():
                fh.write(line + "\n")


@dataclass
class LevelMonitor:
    max_level: int = 0
    count: int = 0

    def observe(self, v: lwe.CipherVec) -> lwe.CipherVec:
        self.max_level = max(self.max_level, v.scale_exp)
        self.count += 1
        return v


# ---------------------------------------------------------------------------
# nodes


class _Party:
    id: int
    channels: dict[int, ChannelKey]

    def _send(self, transport: Transport, receiver: int, kind: Kind, payload: bytes,
              rnd: int, sealed: bool = True) -> None:
        if sealed:
            ch = self.channels.get(receiver)
            if ch is None:
                raise ProtocolError(f"party {self.id} has no channel to {receiver}")
            body = seal(ch, payload, Header(self.id, receiver, rnd, int(kind))).to_bytes()
        else:
            body = payload
        transport.send(ProtocolMessage(kind, self.id, receiver, rnd, sealed, body))

    def _open(self, msg: ProtocolMessage) -> bytes:
        if not msg.sealed:
            return msg.body
        ch = self.channels.get(msg.sender)
        if ch is None:
            raise ProtocolError(f"party {self.id} has no channel to {msg.sender}")
        sm = SealedMessage.from_bytes(msg.body)
        h = sm.header
        if (h.sender, h.receiver, h.round, h.kind) != (msg.sender, msg.receiver, msg.round,
                                                        int(msg.kind)):
            raise ProtocolError("sealed header does not match the frame")
        return open_sealed(ch, sm)


class OperatorNode(_Party):
    def __init__(self, keys: lwe.InstanceKeys, rng: np.random.Generator):
        self.id = OPERATOR
        self.keys = keys
        self.registry = lwe.KeyRegistry()
        self.channels: dict[int, ChannelKey] = {}
        self.delta: dict[int, np.ndarray] = {}
        self.rng = rng

    @property
    def pk(self) -> lwe.PublicKey:
        return self.keys.pk


class AgentNode(_Party):
    """Agent state: plaintext KKT blocks, encrypted iterates, channel and switch keys."""

    def __init__(self, agent_id: int, keys: lwe.InstanceKeys, pk0: lwe.PublicKey,
                 codec: FpCodec, scheme: lwe.SchemeParams, rng: np.random.Generator):
        self.id = agent_id
        self.keys = keys
        self.pk0 = pk0
        self.codec = codec
        self.scheme = scheme
        self.rng = rng
        self.channels: dict[int, ChannelKey] = {}
        self.switch_keys: dict[int, lwe.SwitchKey] = {}
        self.gamma: GammaBlocks | None = None
        self.Kz: np.ndarray | None = None
        self.K: tuple[int, ...] = ()
        self.alpha_len = 0
        self.z = self.lam = self.zeta_slice = self.p = None
        self.p_lifted: lwe.CipherVec | None = None
        self.delta_ct: lwe.CipherVec | None = None
        self.zeta_own: lwe.CipherVec | None = None
        self.alpha_plain: np.ndarray | None = None

    def configure(self, gamma: GammaBlocks, K: tuple[int, ...], alpha_len: int) -> None:
        self.gamma, self.K, self.alpha_len = gamma, tuple(K), alpha_len
        enc = self.codec.encode_ints
        self.Kz = np.hstack([enc(gamma.rhoG11), enc(-gamma.G11), enc(gamma.Pmat)])

    def accept_switch_key(self, subject: int, swk: lwe.SwitchKey) -> None:
        if subject == self.id:
            raise ProtocolError(f"agent {self.id} must not hold the switch key for itself")
        if swk.from_id != OPERATOR or swk.to_id != subject:
            raise ProtocolError("switch key does not match its subject")
        self.switch_keys[subject] = swk

    def lift(self, v: lwe.CipherVec, level: int, mon: LevelMonitor) -> lwe.CipherVec:
        while v.scale_exp < level:
            v = mon.observe(lwe.scalar_mul(self.codec.encode(1.0), v, self.scheme))
        return v


# ---------------------------------------------------------------------------
# encrypted update steps (pure functions on ciphertext vectors)


def enc_z_update(Kz: np.ndarray, zeta_slice: lwe.CipherVec, lam: lwe.CipherVec,
                 p: lwe.CipherVec, scheme: lwe.SchemeParams) -> lwe.CipherVec:
    """``[rho G11 | -G11 | P] (.) (zeta; lambda; p)`` on operands of equal level."""
    x = lwe.CipherVec.concat([zeta_slice, lam, p])
    return lwe.matvec(Kz, x, scheme)


def enc_zeta_average(codec: FpCodec, scheme: lwe.SchemeParams,
                     contributions: list[lwe.CipherVec]) -> lwe.CipherVec:
    """Entry ``r`` is ``(1/len) (.) sum`` over ``contributions[r]`` (one ciphertext each)."""
    flat = lwe.CipherVec.concat(contributions)
    K = np.zeros((len(contributions), len(flat)), dtype=np.int64)
    col = 0
    for r, c in enumerate(contributions):
        K[r, col:col + len(c)] = codec.encode_ints(1.0 / len(c))
        col += len(c)
    return lwe.matvec(K, flat, scheme)


def encrypted_z_update(node: AgentNode, mon: LevelMonitor | None = None) -> lwe.CipherVec:
    mon = mon or LevelMonitor()
    level = max(node.zeta_slice.scale_exp, node.lam.scale_exp, node.p.scale_exp)
    zs = node.lift(node.zeta_slice, level, mon)
    lam = node.lift(node.lam, level, mon)
    if node.p_lifted is None or node.p_lifted.scale_exp > level:
        node.p_lifted = node.p
    node.p_lifted = node.lift(node.p_lifted, level, mon)
    node.z = mon.observe(enc_z_update(node.Kz, zs, lam, node.p_lifted, node.scheme))
    return node.z


def encrypted_zeta_update(owner: AgentNode, shares: Mapping[int, list[lwe.CipherVec]],
                          users: Mapping[int, list[int]], mon: LevelMonitor | None = None
                          ) -> lwe.CipherVec:
    """Average the copies of every entry in ``A_owner``.

    ``shares[k]`` holds the received ciphertexts of entry ``k`` (one per other
    user); the owner's own copy is taken from its ``z``.
    """
    mon = mon or LevelMonitor()
    contributions = []
    for pos, k in enumerate(owner.K[:owner.alpha_len]):
        got = list(shares.get(k, []))
        if len(got) != len(users[k]) - 1:
            raise ProtocolError(f"entry {k}: {len(got)} shares, expected {len(users[k]) - 1}")
        contributions.append(lwe.CipherVec.concat([owner.z[pos:pos + 1]] + got))
    owner.zeta_own = mon.observe(enc_zeta_average(owner.codec, owner.scheme, contributions))
    return owner.zeta_own


def encrypted_lambda_update(node: AgentNode, rho: float,
                            mon: LevelMonitor | None = None) -> lwe.CipherVec:
    mon = mon or LevelMonitor()
    z = node.lift(node.z, node.zeta_slice.scale_exp, mon)
    diff = lwe.sub(z, node.zeta_slice, node.scheme)
    step = mon.observe(lwe.scalar_mul(node.codec.encode(rho), diff, node.scheme))
    lam = node.lift(node.lam, step.scale_exp, mon)
    node.lam = mon.observe(lwe.add(lam, step, node.scheme))
    return node.lam


# ---------------------------------------------------------------------------
# system orchestration


def default_delegates(graph) -> dict[int, int]:
    """Lowest-id neighbor of every agent."""
    out = {}
    for i in graph.agents:
        nb = graph.neighbors(i)
        if not nb:
            raise ProtocolError(f"agent {i} has no neighbor to delegate its key switch to")
        out[i] = nb[0]
    return out


def oracle_enabled_by_env() -> bool:
    return os.environ.get("ENCADMM_TEST_ORACLE", "") not in ("", "0")


class EncryptedSystem:
    """All parties of one scenario plus transport, key material and level monitor."""

    def __init__(self, prob: ConsensusProblem, admm: AdmmParams, codec: FpCodec,
                 scheme: lwe.SchemeParams, seed: int = 0,
                 delegates: Mapping[int, int] | None = None, transport: Transport | None = None,
                 enable_test_oracle: bool = False):
        self.prob = prob
        self.admm = admm
        self.codec = codec
        self.scheme = scheme
        self.seed = seed
        self.transport = transport or Transport()
        self.monitor = LevelMonitor()
        self.layout = prob.layout
        self.users = responsibility_sets(self.layout)
        self.owners = self.layout.owners()
        self.schedule = build_schedule(self.layout)
        self._oracle_allowed = enable_test_oracle or oracle_enabled_by_env()
        self.private: dict[int, set[bytes]] = defaultdict(set)
        self.step_count = 0

        def rng(party, purpose):
            return np.random.default_rng(np.random.SeedSequence([seed, party, purpose]))

        self.operator = OperatorNode(lwe.keygen(scheme, OPERATOR, seed), rng(OPERATOR, 1))
        self.agents: dict[int, AgentNode] = {}
        for i in prob.agents:
            node = AgentNode(i, lwe.keygen(scheme, i, seed), self.operator.pk, codec, scheme,
                             rng(i, 1))
            node.configure(precompute_gamma(prob.costs[i], admm.rho), self.layout.K[i],
                           self.layout.alpha_len[i])
            self.agents[i] = node
            c = prob.costs[i]
            for mat in (c.H, c.F, c.G, c.E):
                self._register_private(i, mat)
        for a, b in prob.graph.sorted_edges():
            self._link(a, b)
        for i in prob.agents:
            self._link(OPERATOR, i)
        self.delegates = dict(delegates) if delegates is not None else default_delegates(prob.graph)

    def _link(self, a: int, b: int) -> None:
        key = establish((a, b), self.seed)
        parties = {OPERATOR: self.operator, **self.agents}
        # each endpoint keeps its own nonce counters
        parties[a].channels[b] = key
        parties[b].channels[a] = ChannelKey(key.edge, key.key)

    def channel_keys(self) -> dict[tuple[int, int], bytes]:
        """Copies of all link keys for an auditor role."""
        out = {}
        for i, ch in self.operator.channels.items():
            out[ch.edge] = ch.key
        for node in self.agents.values():
            for ch in node.channels.values():
                out[ch.edge] = ch.key
        return out

    def _register_private(self, i: int, values) -> None:
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        u = np.unique(arr[arr != 0.0])
        words = (u[k:k + 1].tobytes() for k in range(u.size))
        self.private[i].update(w for w in words if distinctive(w))

    def roles(self) -> "AuditRoles":
        return AuditRoles(operator_id=OPERATOR, channel_keys=self.channel_keys(),
                          private=self.private, scheme=self.scheme)

    # -- setup ------------------------------------------------------------------

    def setup(self) -> None:
        operator_setup(self.operator, self.agents, self.delegates, self.transport,
                       self.codec, self.prob.graph)

    def load_params(self, prob: ConsensusProblem) -> None:
        """Operator delivers encrypted delta; agents encrypt their own beta."""
        self.prob = prob
        rnd = self.transport.new_round()
        for i, node in self.agents.items():
            par = prob.params[i]
            self.operator.delta[i] = par.delta
            ct = lwe.encrypt_values(self.operator.pk, self.codec, par.delta, self.operator.rng) \
                if par.delta.size else None
            if ct is not None:
                self.operator._send(self.transport, i, Kind.DELTA_PARAM, ct.to_bytes(), rnd)
        for i, node in self.agents.items():
            par = prob.params[i]
            self._register_private(i, par.beta)
            parts = []
            if par.beta.size:
                parts.append(lwe.encrypt_values(node.pk0, self.codec, par.beta, node.rng))
            if par.delta.size:
                msg = self.transport.recv(i, OPERATOR, Kind.DELTA_PARAM)
                delta = lwe.CipherVec.from_bytes(node._open(msg), self.scheme)
                if delta.instance_id != OPERATOR or len(delta) != par.delta.size:
                    raise ProtocolError(f"agent {i}: malformed delta parameters")
                parts.append(delta)
            node.p = self.monitor.observe(lwe.CipherVec.concat(parts))
            node.p_lifted = None

    # -- one control step -------------------------------------------------------

    def solve(self, prob: ConsensusProblem, guesses: Mapping[int, np.ndarray]) -> dict:
        """Initialization, ``iterations`` encrypted iterations and the final switch."""
        self.load_params(prob)
        encrypted_init(self, guesses)
        for tau in range(self.admm.iterations):
            run_encrypted_iteration(self, tau)
        alpha = {i: final_key_switch(self, i, self.delegates[i]) for i in self.agents}
        self.transport.assert_drained()
        self.step_count += 1
        return alpha

    # -- test-only -------------------------------------------------------------

    def oracle_decrypt(self, v: lwe.CipherVec, what: str = "") -> np.ndarray:
        """Decrypt an instance-0 vector with the operator key; test configuration only."""
        if not self._oracle_allowed:
            raise ProtocolError("the sk0 oracle is disabled outside test configuration")
        self.transport.note("test_oracle_decrypt", what=what, count=len(v))
        return lwe.decrypt_values(self.operator.keys, self.codec, v)


def operator_setup(operator: OperatorNode, agents: Mapping[int, AgentNode],
                   delegates: Mapping[int, int], transport: Transport, codec: FpCodec,
                   graph) -> None:
    """Issue ``0 -> i`` switch keys and deliver each one sealed to agent i's delegate."""
    for i, j in sorted(delegates.items()):
        if i == j:
            raise ProtocolError(f"agent {i} cannot be its own delegate")
        if not graph.has_edge(i, j):
            raise ProtocolError(f"delegate {j} is not a neighbor of agent {i}")
    for i, j in sorted(delegates.items()):
        swk = lwe.gen_switch_key(operator.keys, agents[i].keys.pk, operator.registry,
                                 codec.S, operator.rng)
        # a delegate may serve several agents: one round per delivery
        operator._send(transport, j, Kind.SWITCH_KEY_DELIVERY, pack_switch_key(i, swk),
                       transport.new_round())
    if lwe.detect_key_cycles(operator.registry.edges):
        raise lwe.KeyCycleError("issued switch keys contain a cycle")
    for i, j in sorted(delegates.items()):
        msg = transport.recv(j, OPERATOR, Kind.SWITCH_KEY_DELIVERY)
        raw = agents[j]._open(msg)
        subject, _, _ = switch_key_header(raw)
        agents[j].accept_switch_key(subject, lwe.SwitchKey.from_bytes(raw[4:], agents[j].scheme))


def _exchange(sys: EncryptedSystem, kind: Kind, links, value_of) -> dict:
    """Send one bundled share message per link and return ``{(receiver, k): [vecs]}``.

    ``links`` are ``(sender, receiver, k)`` triples; ``value_of(sender, k)``
    returns a one-entry CipherVec.
    """
    bundles: dict[tuple[int, int], list[int]] = defaultdict(list)
    for s, r, k in links:
        bundles[(s, r)].append(k)
    rnd = sys.transport.new_round()
    for (s, r), ks in sorted(bundles.items()):
        vec = lwe.CipherVec.concat([value_of(s, k) for k in ks])
        sys.agents[s]._send(sys.transport, r, kind, pack_shares(ks, vec), rnd)
    got: dict[tuple[int, int], list] = defaultdict(list)
    for (s, r), ks in sorted(bundles.items()):
        node = sys.agents[r]
        rks, vec = unpack_shares(node._open(sys.transport.recv(r, s, kind)), sys.scheme)
        if rks != ks or vec.instance_id != OPERATOR:
            raise ProtocolError(f"unexpected share bundle from {s} to {r}")
        for pos, k in enumerate(rks):
            got[(r, k)].append(vec[pos:pos + 1])
    return got


def _assemble_slice(sys: EncryptedSystem, i: int, own: lwe.CipherVec, got) -> lwe.CipherVec:
    node = sys.agents[i]
    parts = []
    for pos, k in enumerate(node.K):
        if sys.owners[k] == i:
            parts.append(own[pos:pos + 1])
        else:
            (v,) = got[(i, k)]
            parts.append(v)
    return lwe.CipherVec.concat(parts)


def encrypted_init(sys: EncryptedSystem, guesses: Mapping[int, np.ndarray]) -> None:
    """Zero duals, encrypted guesses, and one exchange of the guessed alpha entries."""
    enc_guess = {}
    for i, node in sys.agents.items():
        g = np.asarray(guesses[i], float).reshape(-1)
        if g.size != node.alpha_len:
            raise ProtocolError(f"agent {i}: guess of length {g.size}")
        sys._register_private(i, g)
        enc_guess[i] = lwe.encrypt_values(node.pk0, sys.codec, g, node.rng)
        node.lam = lwe.encrypt_values(node.pk0, sys.codec, np.zeros(len(node.K)), node.rng)
        node.z = None
    got = _exchange(sys, Kind.INIT_ALPHA_SHARE, sys.schedule.init,
                    lambda s, k: enc_guess[s][sys.layout.local_pos(s, k):
                                              sys.layout.local_pos(s, k) + 1])
    for i, node in sys.agents.items():
        node.zeta_slice = sys.monitor.observe(_assemble_slice(sys, i, enc_guess[i], got))
        node.zeta_own = enc_guess[i]


def run_encrypted_iteration(sys: EncryptedSystem, tau: int) -> None:
    """Local update, share exchange, averaging, broadcast, dual update.

    With ``early_stop`` the last iteration ends after the local update.
    """
    if tau >= sys.admm.iterations:
        raise ProtocolError("iteration index beyond the configured count")
    for node in sys.agents.values():
        encrypted_z_update(node, sys.monitor)
    if sys.admm.early_stop and tau == sys.admm.iterations - 1:
        return
    lay = sys.layout
    got = _exchange(sys, Kind.Z_SHARE, sys.schedule.share,
                    lambda s, k: sys.agents[s].z[lay.local_pos(s, k):lay.local_pos(s, k) + 1])
    for i, node in sys.agents.items():
        shares = {k: got.get((i, k), []) for k in lay.A(i)}
        encrypted_zeta_update(node, shares, sys.users, sys.monitor)
    got = _exchange(sys, Kind.ZETA_SHARE, sys.schedule.broadcast,
                    lambda s, k: sys.agents[s].zeta_own[lay.local_pos(s, k):
                                                        lay.local_pos(s, k) + 1])
    for i, node in sys.agents.items():
        node.zeta_slice = _assemble_slice(sys, i, node.zeta_own, got)
    for node in sys.agents.values():
        encrypted_lambda_update(node, sys.admm.rho, sys.monitor)


def final_alpha_ciphertext(sys: EncryptedSystem, i: int) -> lwe.CipherVec:
    node = sys.agents[i]
    if sys.admm.iterations == 0:
        return node.zeta_own
    if sys.admm.early_stop:
        return node.z[:node.alpha_len]
    return node.zeta_own


def final_key_switch(sys: EncryptedSystem, i: int, j: int) -> np.ndarray:
    """Agent ``i`` has delegate ``j`` re-encrypt its alpha block to instance ``i``."""
    node, dele = sys.agents[i], sys.agents.get(j)
    if dele is None or not sys.prob.graph.has_edge(i, j):
        raise ProtocolError(f"{j} is not a neighbor of agent {i}")
    ct = final_alpha_ciphertext(sys, i)
    rnd = sys.transport.new_round()
    node._send(sys.transport, j, Kind.FINAL_SWITCH_REQUEST, ct.to_bytes(), rnd)
    msg = sys.transport.recv(j, i, Kind.FINAL_SWITCH_REQUEST)
    req = lwe.CipherVec.from_bytes(dele._open(msg), sys.scheme)
    swk = dele.switch_keys.get(i)
    if swk is None:
        raise ProtocolError(f"delegate {j} holds no switch key for agent {i}")
    out = sys.monitor.observe(lwe.key_switch(req, swk, sys.scheme))
    rnd = sys.transport.new_round()
    dele._send(sys.transport, i, Kind.FINAL_SWITCH_RESPONSE, out.to_bytes(), rnd, sealed=False)
    res = lwe.CipherVec.from_bytes(node._open(sys.transport.recv(i, j,
                                                                  Kind.FINAL_SWITCH_RESPONSE)),
                                   sys.scheme)
    alpha = lwe.decrypt_values(node.keys, sys.codec, res)
    node.alpha_plain = alpha
    sys._register_private(i, alpha)
    return alpha


# ---------------------------------------------------------------------------
# audit


@dataclass
class AuditRoles:
    operator_id: int
    channel_keys: Mapping[tuple[int, int], bytes]
    private: Mapping[int, set[bytes]]
    scheme: lwe.SchemeParams


@dataclass
class AuditResult:
    violations: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    messages: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def distinctive(word: bytes) -> bool:
    """Whether an 8-byte float pattern is worth scanning for.

    Round values such as 2.0 or 0.5 are seven zero bytes plus one; products
    with encoded constants leave long zero runs in ciphertext residues, so
    such patterns occur by chance and are skipped.
    """
    return sum(b != 0 for b in word) >= 4


def _contains_any(payload: bytes, needles: set[bytes]) -> bool:
    if not needles or len(payload) < 8:
        return False
    want = np.frombuffer(b"".join(sorted(needles)), dtype=np.uint64)
    buf = np.frombuffer(payload, dtype=np.uint8)
    for off in range(8):
        usable = (len(buf) - off) // 8
        if usable <= 0:
            continue
        words = buf[off:off + 8 * usable].view(np.uint64)
        if np.isin(words, want).any():
            return True
    return False


class Auditor:
    """Checks every frame against the security rules; usable online as a transport observer.

    (a) no plaintext private float of agent ``i`` in a payload sent by ``i``;
    (b) the operator receives no iterate;
    (c) everything is sealed except the key-switched reply;
    (d) the switch key for agent ``i`` is never delivered to ``i``;
    (e) shares and parameters travel as instance-0 ciphertexts.
    """

    def __init__(self, roles: AuditRoles):
        self.roles = roles
        self.result = AuditResult()

    def __call__(self, msg: ProtocolMessage) -> None:
        self.observe(msg)

    def _flag(self, rule: str, msg: ProtocolMessage, text: str) -> None:
        self.result.violations.append(
            f"({rule}) round {msg.round} {msg.name} {msg.sender}->{msg.receiver}: {text}")

    def _payload(self, msg: ProtocolMessage) -> bytes | None:
        if not msg.sealed:
            return msg.body
        edge = tuple(sorted((msg.sender, msg.receiver)))
        key = self.roles.channel_keys.get(edge)
        if key is None:
            return None
        try:
            return open_sealed(ChannelKey(edge, key), SealedMessage.from_bytes(msg.body))
        except Exception:
            return None

    def observe(self, msg: ProtocolMessage) -> None:
        self.result.messages += 1
        op = self.roles.operator_id
        if msg.receiver == op and msg.kind in ITERATE_KINDS:
            self._flag("b", msg, "operator received an iterate")
        if not msg.sealed and msg.kind != Kind.FINAL_SWITCH_RESPONSE:
            self._flag("c", msg, "payload not sealed")
        payload = self._payload(msg)
        if payload is None:
            self._flag("c", msg, "sealed payload could not be authenticated")
            return
        if msg.sender != op and _contains_any(payload, self.roles.private.get(msg.sender, set())):
            self._flag("a", msg, "plaintext private value in payload")
        if msg.kind == Kind.SWITCH_KEY_DELIVERY:
            try:
                subject, frm, to = switch_key_header(payload)
            except (ProtocolError, struct.error):
                self._flag("d", msg, "malformed switch key delivery")
                return
            if subject == msg.receiver or to == msg.receiver:
                self._flag("d", msg, f"switch key for agent {subject} delivered to its subject")
        elif msg.kind != Kind.FINAL_SWITCH_RESPONSE:
            try:
                if msg.kind in SHARE_KINDS:
                    _, vec = unpack_shares(payload, self.roles.scheme)
                else:
                    vec = lwe.CipherVec.from_bytes(payload, self.roles.scheme)
            except Exception:
                self._flag("e", msg, "payload is not a ciphertext vector")
                return
            if vec.instance_id != op:
                self._flag("e", msg, f"ciphertexts under instance {vec.instance_id}")
        else:
            try:
                vec = lwe.CipherVec.from_bytes(payload, self.roles.scheme)
            except Exception:
                self._flag("e", msg, "payload is not a ciphertext vector")
                return
            if vec.instance_id != msg.receiver:
                self._flag("e", msg, "key-switched reply not under the recipient's instance")

    def finish(self, log: Iterable[dict] = ()) -> AuditResult:
        for entry in log:
            if entry.get("event") == "test_oracle_decrypt":
                self.result.flags.append(f"test-only sk0 oracle used ({entry.get('what', '')})")
        return self.result


def audit_trace(log, roles: AuditRoles) -> AuditResult:
    """Audit a finished run: a :class:`Transport` with kept frames, or an iterable of frames."""
    aud = Auditor(roles)
    if isinstance(log, Transport):
        if not log.keep_frames:
            raise ProtocolError("transport kept no frames; attach an Auditor as observer instead")
        frames, entries = log.frames, log.log
    else:
        frames, entries = log, ()
    for msg in frames:
        aud.observe(msg)
    return aud.finish(entries)


def required_depth(iterations: int, early_stop: bool = False) -> int:
    """Largest scale exponent a run reaches, including the final key switch.

    Each full iteration costs three levels (local update, averaging, dual
    update); fresh encryptions start at 1 and the switch adds one more.
    Stopping the last iteration after its local update saves one level.
    """
    if iterations == 0:
        return 2
    return 3 * iterations + (0 if early_stop else 1)

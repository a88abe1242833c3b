import numpy as np
import pytest

from helpers import scalar_pair
from encadmm import lwe
from encadmm.admm import AdmmParams, build_schedule, run_plain_admm, z_update
from encadmm.fixedpoint import FpCodec
from encadmm.formation import build_problem, initial_guess, scenario
from encadmm.graph import CommGraph, IndexLayout
from encadmm.problem import AgentCost, ConsensusProblem, StructuredParam
from encadmm.protocol import (OPERATOR, Auditor, EncryptedSystem, Kind, ProtocolError,
                              ProtocolMessage, Transport, audit_trace, default_delegates,
                              enc_zeta_average, encrypted_init, encrypted_lambda_update,
                              encrypted_z_update, final_alpha_ciphertext, final_key_switch,
                              pack_shares, pack_switch_key, required_depth,
                              run_encrypted_iteration)

CODEC = FpCodec.standard()
SCHEME = lwe.SchemeParams(n=16, q=CODEC.q, levels=CODEC.L)
TOL = 2.0 ** -20


def system(prob, iterations=5, seed=0, early_stop=False, **kw):
    s = EncryptedSystem(prob, AdmmParams(0.2, iterations, early_stop=early_stop), CODEC,
                        SCHEME, seed=seed, enable_test_oracle=True, **kw)
    return s


def enc(node, values):
    return lwe.encrypt_values(node.pk0, CODEC, values, node.rng)


def ring_setup(seed=1):
    sc = scenario("ring8", seed=seed)
    prob = build_problem(sc.spec, 0, sc.x0, {i: np.zeros(2) for i in sc.x0})
    guess = initial_guess(sc.spec, {i: sc.x0[i][:2] for i in sc.x0})
    return sc, prob, guess


@pytest.fixture(scope="module")
def ring_run():
    sc, prob, guess = ring_setup()
    s = system(prob)
    s.setup()
    alpha = s.solve(prob, guess)
    return s, prob, guess, alpha


# encrypted update steps ------------------------------------------------------


def test_zero_state_z_update():
    prob = scalar_pair()
    s = system(prob)
    node = s.agents[2]
    node.zeta_slice, node.lam, node.p = enc(node, [0, 0]), enc(node, [0, 0]), enc(node, [0])
    assert np.max(np.abs(s.oracle_decrypt(encrypted_z_update(node)))) <= 1 / CODEC.S


def test_scalar_z_update_matches_plain():
    prob = scalar_pair()
    s = system(prob)
    node = s.agents[2]
    zs, lam, p = np.array([0.75, -1.5]), np.array([0.3, 0.1]), np.array([3.0])
    node.zeta_slice, node.lam, node.p = enc(node, zs), enc(node, lam), enc(node, p)
    got = s.oracle_decrypt(encrypted_z_update(node))
    want = z_update(node.gamma, zs, lam, p)
    assert np.max(np.abs(got - want)) <= TOL * (1 + np.max(np.abs(np.r_[zs, lam, p])))


def test_zeta_average_examples():
    s = system(scalar_pair())
    node = s.agents[1]
    pair = enc(node, [2.0, 4.0])
    out = enc_zeta_average(CODEC, SCHEME, [pair])
    assert out.scale_exp == 2
    assert abs(s.oracle_decrypt(out)[0] - 3.0) <= TOL
    single = enc(node, [-1.25])
    out = enc_zeta_average(CODEC, SCHEME, [single])
    assert out.scale_exp == 2 and abs(s.oracle_decrypt(out)[0] + 1.25) <= TOL


def test_lambda_update_examples():
    s = system(scalar_pair())
    node = s.agents[2]
    lam = np.array([0.5, -0.25])
    node.z, node.zeta_slice, node.lam = enc(node, [3.0, 1.0]), enc(node, [2.0, 2.0]), \
        enc(node, lam)
    new = s.oracle_decrypt(encrypted_lambda_update(node, 0.2))
    assert np.max(np.abs(new - lam - [0.2, -0.2])) <= TOL
    node.z, node.zeta_slice, node.lam = enc(node, [1.5, 1.0]), enc(node, [1.5, 1.0]), \
        enc(node, lam)
    assert np.max(np.abs(s.oracle_decrypt(encrypted_lambda_update(node, 0.2)) - lam)) <= TOL


# full runs --------------------------------------------------------------------


def zeros(prob):
    return {i: np.zeros(prob.layout.alpha_len[i]) for i in prob.agents}


def test_scalar_pair_matches_plain():
    prob = scalar_pair(1.0, 3.0)
    s = system(prob, 5)
    s.setup()
    alpha = s.solve(prob, zeros(prob))
    plain = run_plain_admm(prob, AdmmParams(0.2, 5), zeros(prob)).alpha
    for i in prob.agents:
        assert np.max(np.abs(alpha[i] - plain[i])) <= 1e-3
    assert s.monitor.max_level == required_depth(5) == 16


def test_early_stop_skips_exchange():
    prob = scalar_pair()
    s = system(prob, 1, early_stop=True)
    s.setup()
    alpha = s.solve(prob, zeros(prob))
    kinds = {e["kind"] for e in s.transport.log if "kind" in e}
    assert "ZShare" not in kinds and "ZetaShare" not in kinds
    plain = run_plain_admm(prob, AdmmParams(0.2, 1, early_stop=True), zeros(prob)).alpha
    assert all(np.max(np.abs(alpha[i] - plain[i])) <= 1e-3 for i in prob.agents)
    assert s.monitor.max_level == required_depth(1, early_stop=True) == 3


def test_required_depth():
    assert required_depth(5) == 16
    assert required_depth(5, early_stop=True) == 15
    assert required_depth(0) == 2


def test_single_agent_sends_nothing():
    g = CommGraph(1)
    lay = IndexLayout(1, {1: [1]}, {1: 1})
    prob = ConsensusProblem(g, lay, {1: AgentCost([[1.0]], [[-1.0]])}, {1: StructuredParam([1.0])})
    assert len(build_schedule(lay).init) == 0
    s = system(prob, delegates={})
    s.load_params(prob)
    before = len(s.transport.log)
    encrypted_init(s, {1: [0.5]})
    assert len(s.transport.log) == before
    with pytest.raises(ProtocolError):
        default_delegates(g)


def test_ring_init_exchange_and_zeta0():
    sc, prob, guess = ring_setup()
    s = system(prob)
    s.load_params(prob)
    encrypted_init(s, guess)
    sends = [e for e in s.transport.log if e.get("kind") == "InitAlphaShare"]
    assert len(sends) == 16
    for i in prob.agents:
        assert sorted(e["receiver"] for e in sends if e["sender"] == i) == \
            sorted(prob.graph.neighbors(i))
    zeta0 = run_plain_admm(prob, AdmmParams(0.2, 0), guess).zeta0
    for i, node in s.agents.items():
        want = zeta0[np.array(prob.layout.K[i]) - 1]
        assert np.max(np.abs(s.oracle_decrypt(node.zeta_slice) - want)) <= 1 / CODEC.S

    # one local update from the initial state agrees with the plaintext step
    for i, node in s.agents.items():
        got = s.oracle_decrypt(encrypted_z_update(node, s.monitor))
        want = z_update(node.gamma, zeta0[np.array(prob.layout.K[i]) - 1],
                        np.zeros(len(node.K)), prob.params[i].p)
        assert np.max(np.abs(got - want)) <= 1e-3


def test_ring_run_matches_plain(ring_run):
    s, prob, guess, alpha = ring_run
    plain = run_plain_admm(prob, AdmmParams(0.2, 5), guess).alpha
    dev = max(np.max(np.abs(alpha[i] - plain[i])) for i in prob.agents)
    assert dev <= 1e-3
    assert s.monitor.max_level == 16


def test_final_switch_matches_oracle(ring_run):
    s, prob, _, alpha = ring_run
    for i in (1, 4):
        ref = s.oracle_decrypt(final_alpha_ciphertext(s, i), "alpha")
        assert np.max(np.abs(alpha[i] - ref)) <= 1 / CODEC.S


def test_delegate_without_key(ring_run):
    s = ring_run[0]
    # agent 1 delegates to 2 by default; 8 is a neighbor but holds no key for 1
    assert s.delegates[1] == 2
    with pytest.raises(ProtocolError):
        final_key_switch(s, 1, 8)
    with pytest.raises(ProtocolError):
        final_key_switch(s, 1, 5)


def test_registry_is_star(ring_run):
    s = ring_run[0]
    assert sorted(s.operator.registry.edges) == [(0, i) for i in range(1, 9)]
    assert lwe.detect_key_cycles(s.operator.registry.edges) == []


def test_compliant_ring_run_passes_audit(ring_run):
    s = ring_run[0]
    res = audit_trace(s.transport, s.roles())
    assert res.ok, res.violations
    assert res.messages == sum(1 for e in s.transport.log if "kind" in e)
    assert any("oracle" in f for f in res.flags)


# delegates and setup ------------------------------------------------------------


def star_problem():
    sc = scenario("star9", seed=2)
    return build_problem(sc.spec, 0, sc.x0, {i: np.zeros(2) for i in sc.x0})


def test_star_delegation_ok():
    prob = star_problem()
    delegates = {1: 5, **{i: 1 for i in range(2, 10)}}
    s = system(prob, delegates=delegates)
    s.setup()
    assert set(s.agents[1].switch_keys) == set(range(2, 10))
    assert set(s.agents[5].switch_keys) == {1}
    assert lwe.detect_key_cycles(s.operator.registry.edges) == []


def test_self_delegate_rejected():
    prob = scalar_pair()
    s = system(prob, delegates={1: 1, 2: 1})
    with pytest.raises(ProtocolError):
        s.setup()


def test_non_neighbor_delegate_rejected():
    prob = star_problem()
    s = system(prob, delegates={1: 2, 2: 3, **{i: 1 for i in range(3, 10)}})
    with pytest.raises(ProtocolError):
        s.setup()


# fault injection ---------------------------------------------------------------


def test_fault_unsealed_share():
    prob = scalar_pair()
    s = system(prob)
    node = s.agents[2]
    z = enc(node, [1.0])
    node._send(s.transport, 1, Kind.Z_SHARE, pack_shares([1], z), 1, sealed=False)
    res = audit_trace(s.transport, s.roles())
    assert any(v.startswith("(c)") for v in res.violations)


def test_fault_operator_receives_zeta():
    prob = scalar_pair()
    s = system(prob)
    s.agents[1]._send(s.transport, OPERATOR, Kind.ZETA_SHARE,
                      pack_shares([1], enc(s.agents[1], [2.0])), 1)
    res = audit_trace(s.transport, s.roles())
    assert any(v.startswith("(b)") for v in res.violations)


def test_fault_switch_key_to_subject():
    prob = scalar_pair()
    s = system(prob)
    swk = lwe.gen_switch_key(s.operator.keys, s.agents[1].keys.pk, s.operator.registry,
                             CODEC.S, s.operator.rng)
    aud = Auditor(s.roles())
    s.transport.observers.append(aud)
    s.operator._send(s.transport, 1, Kind.SWITCH_KEY_DELIVERY, pack_switch_key(1, swk), 1)
    assert any(v.startswith("(d)") for v in aud.finish().violations)
    with pytest.raises(ProtocolError):
        s.agents[1].accept_switch_key(1, swk)


def test_fault_plaintext_leak():
    prob = scalar_pair()
    s = system(prob)
    s.load_params(prob)
    leak = np.array([np.pi, np.e]).tobytes()
    s._register_private(2, [np.pi, np.e])
    s.agents[2]._send(s.transport, 1, Kind.Z_SHARE, leak, s.transport.new_round())
    res = audit_trace(s.transport, s.roles())
    assert any(v.startswith("(a)") for v in res.violations)


# transport -----------------------------------------------------------------------


def test_oracle_disabled_by_default(monkeypatch):
    monkeypatch.delenv("ENCADMM_TEST_ORACLE", raising=False)
    prob = scalar_pair()
    s = EncryptedSystem(prob, AdmmParams(0.2, 1), CODEC, SCHEME)
    with pytest.raises(ProtocolError):
        s.oracle_decrypt(enc(s.agents[1], [1.0]))


def test_round_tags_increase():
    t = Transport()
    t.send(ProtocolMessage(Kind.Z_SHARE, 1, 2, 3, True, b""))
    with pytest.raises(ProtocolError):
        t.send(ProtocolMessage(Kind.Z_SHARE, 1, 2, 3, True, b""))
    t.send(ProtocolMessage(Kind.Z_SHARE, 2, 1, 3, True, b""))
    with pytest.raises(ProtocolError):
        t.send(ProtocolMessage(Kind.Z_SHARE, 1, 1, 4, True, b""))
    with pytest.raises(ProtocolError):
        t.recv(2, 1, Kind.ZETA_SHARE)


def test_frame_round_trip():
    m = ProtocolMessage(Kind.FINAL_SWITCH_RESPONSE, 3, 4, 9, False, b"abc")
    assert ProtocolMessage.from_bytes(m.to_bytes()) == m
    with pytest.raises(ProtocolError):
        ProtocolMessage.from_bytes(m.to_bytes()[:-1])


def test_logs_deterministic():
    prob = scalar_pair()
    logs = []
    for _ in range(2):
        s = system(prob, 2, seed=5)
        s.setup()
        s.solve(prob, zeros(prob))
        logs.append(s.transport.log_lines())
    assert logs[0] == logs[1]
    s = system(prob, 2, seed=6)
    s.setup()
    s.solve(prob, zeros(prob))
    assert s.transport.log_lines() != logs[0]

"""Plaintext distributed ADMM for general consensus problems.

Each iteration runs three steps.  Every agent updates its local variable by
solving its regularized KKT system.  The owner of each global entry then
averages the copies of that entry.  Finally every agent takes a dual ascent
step.  The averaging form is only valid when all duals start at zero, so the
engine always initializes ``lambda = 0``.

The message flow inside one iteration (agents exchange values in rounds)::

    1  z_i <- z_update(...)                                 local
    2  i -> owner(k):  (z_i)_k   for k in K_i \\ A_i          send
    3  owner averages ζ_k over I_k                           receive, local
    5  owner -> j:     ζ_k       for j in I_k \\ {owner}      send
    6  j collects ζ[K_j]                                     receive
    7  λ_i <- λ_i + ρ (z_i - ζ[K_i])                         local

The engine simulates these rounds in-process with explicit mailboxes, so
that unmatched sends or receives surface as errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.linalg as sla

from .graph import IndexLayout, responsibility_sets
from .problem import AgentCost, ConsensusProblem, ProblemError, validate_problem


class AdmmError(ValueError):
    pass


class ScheduleError(AdmmError):
    pass


@dataclass(frozen=True)
class AdmmParams:
    rho: float = 0.2
    iterations: int = 5
    # stop the last iteration right after the local update; alpha is then read
    # from z instead of from the averaged global entries
    early_stop: bool = False

    def __post_init__(self):
        if not self.rho > 0:
            raise AdmmError("rho must be positive")
        if self.iterations < 0:
            raise AdmmError("iteration count must be non-negative")


@dataclass(frozen=True, eq=False)
class GammaBlocks:
    G11: np.ndarray
    G12: np.ndarray
    rhoG11: np.ndarray
    Pmat: np.ndarray
    rho: float
    identity_residual: float


def precompute_gamma(c: AgentCost, rho: float, tol: float = 1e-10) -> GammaBlocks:
    """Top blocks of the inverse of ``[[H + rho I, G'], [G, 0]]`` and derived products."""
    K = c.kkt(rho)
    n = K.shape[0]
    try:
        inv = sla.solve(K, np.eye(n), assume_a="sym")
    except (sla.LinAlgError, ValueError) as exc:
        raise AdmmError(f"KKT matrix singular: {exc}") from exc
    res = float(np.max(np.abs(K @ inv - np.eye(n)), initial=0.0))
    if not np.all(np.isfinite(inv)) or res > tol * max(1.0, np.linalg.norm(K, np.inf)
                                                        * np.linalg.norm(inv, np.inf)):
        raise AdmmError(f"KKT matrix singular (identity residual {res:.3g})")
    v = c.v
    G11 = inv[:v, :v]
    G12 = inv[:v, v:]
    Pmat = G12 @ c.E - G11 @ c.F
    return GammaBlocks(G11, G12, rho * G11, Pmat, rho, res)


def _check_dims(g: GammaBlocks, *vecs):
    v = g.G11.shape[0]
    for x in vecs:
        if x.shape != (v,):
            raise AdmmError(f"expected vectors of length {v}, got {x.shape}")


def z_update(g: GammaBlocks, zeta_slice, lam, p) -> np.ndarray:
    zeta_slice, lam = np.asarray(zeta_slice, float), np.asarray(lam, float)
    p = np.asarray(p, float)
    _check_dims(g, zeta_slice, lam)
    if p.shape != (g.Pmat.shape[1],):
        raise AdmmError(f"expected p of length {g.Pmat.shape[1]}")
    return g.rhoG11 @ zeta_slice - g.G11 @ lam + g.Pmat @ p


def z_update_direct(c: AgentCost, rho: float, zeta_slice, lam, p) -> np.ndarray:
    """Reference path: solve the regularized local KKT system for the new ``z``."""
    p = np.asarray(p, float)
    rhs = np.concatenate([rho * np.asarray(zeta_slice, float) - np.asarray(lam, float)
                          - c.F @ p, c.E @ p])
    return np.linalg.solve(c.kkt(rho), rhs)[:c.v]


def zeta_average(layout: IndexLayout, contributions: Mapping[int, list]) -> dict[int, float]:
    users = responsibility_sets(layout)
    out = {}
    for k, vals in contributions.items():
        if k not in users:
            raise AdmmError(f"unknown entry {k}")
        if len(vals) != len(users[k]):
            raise AdmmError(f"entry {k}: {len(vals)} contributions, expected {len(users[k])}")
        out[k] = float(np.mean(vals))
    return out


def lambda_update(rho: float, lam, z, zeta_slice) -> np.ndarray:
    lam, z, zs = (np.asarray(a, float) for a in (lam, z, zeta_slice))
    if not lam.shape == z.shape == zs.shape:
        raise AdmmError("dimension mismatch in dual update")
    return lam + rho * (z - zs)


# ---------------------------------------------------------------------------
# message schedule


@dataclass(frozen=True)
class Schedule:
    """Per-iteration sends: ``(sender, receiver, k)`` triples for steps 2 and 5."""

    share: tuple[tuple[int, int, int], ...]
    broadcast: tuple[tuple[int, int, int], ...]
    init: tuple[tuple[int, int, int], ...]


def build_schedule(layout: IndexLayout) -> Schedule:
    users = responsibility_sets(layout)
    owners = layout.owners()
    share = tuple((i, owners[k], k) for i in layout.agents for k in layout.K[i]
                  if owners[k] != i)
    broadcast = tuple((owners[k], j, k) for k in sorted(users) for j in users[k]
                      if j != owners[k])
    # initialization exchanges the guessed alpha entries along the same links as step 5
    return Schedule(share, broadcast, broadcast)


class Mailbox:
    """Round-local message store; every send must be received exactly once."""

    def __init__(self):
        self._box: dict[tuple[int, int, int], object] = {}

    def send(self, sender: int, receiver: int, k: int, value) -> None:
        key = (sender, receiver, k)
        if key in self._box:
            raise ScheduleError(f"duplicate send {key}")
        self._box[key] = value

    def recv(self, sender: int, receiver: int, k: int):
        try:
            return self._box.pop((sender, receiver, k))
        except KeyError:
            raise ScheduleError(f"expected message {(sender, receiver, k)} was never sent") \
                from None

    def close(self) -> None:
        if self._box:
            raise ScheduleError(f"unreceived messages: {sorted(self._box)[:5]}")


# ---------------------------------------------------------------------------
# full run


@dataclass(eq=False)
class IterRecord:
    z: dict[int, np.ndarray]
    zeta_slice: dict[int, np.ndarray] = field(default_factory=dict)
    lam: dict[int, np.ndarray] = field(default_factory=dict)
    zeta: np.ndarray | None = None
    complete: bool = True


@dataclass(eq=False)
class AdmmTrace:
    zeta0: np.ndarray
    zeta_slice0: dict[int, np.ndarray]
    lam0: dict[int, np.ndarray]
    iterations: list[IterRecord]
    alpha: dict[int, np.ndarray]

    @property
    def zeta(self) -> np.ndarray:
        """Latest global vector (the initial one when no averaging happened)."""
        for rec in reversed(self.iterations):
            if rec.zeta is not None:
                return rec.zeta
        return self.zeta0


def initial_zeta(prob: ConsensusProblem, init: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Local slices ``zeta[K_i]`` built from the guessed alpha blocks (exchanged once)."""
    lay = prob.layout
    mail = Mailbox()
    sched = build_schedule(lay)
    guess = {i: np.asarray(init[i], float).reshape(-1) for i in lay.agents}
    for i in lay.agents:
        if guess[i].size != lay.alpha_len[i]:
            raise AdmmError(f"agent {i}: guess has {guess[i].size} entries, "
                            f"alpha has {lay.alpha_len[i]}")
    for s, r, k in sched.init:
        mail.send(s, r, k, guess[s][lay.local_pos(s, k)])
    owners = lay.owners()
    out = {}
    for i in lay.agents:
        vals = []
        for k in lay.K[i]:
            o = owners[k]
            vals.append(guess[i][lay.local_pos(i, k)] if o == i else mail.recv(o, i, k))
        out[i] = np.array(vals)
    mail.close()
    return out


def run_plain_admm(prob: ConsensusProblem, params: AdmmParams,
                   init: Mapping[int, np.ndarray], gammas: Mapping[int, GammaBlocks] | None = None,
                   validate: bool = True) -> AdmmTrace:
    """Initialization followed by ``params.iterations`` lock-step iterations."""
    if validate:
        rep = validate_problem(prob)
        if not rep:
            raise ProblemError("; ".join(rep.issues))
    lay = prob.layout
    agents = lay.agents
    if gammas is None:
        gammas = {i: precompute_gamma(prob.costs[i], params.rho) for i in agents}
    users = responsibility_sets(lay)
    owners = lay.owners()
    sched = build_schedule(lay)
    p = {i: prob.params[i].p for i in agents}

    zs = initial_zeta(prob, init)
    lam = {i: np.zeros(lay.v(i)) for i in agents}
    zeta0 = np.zeros(lay.nu)
    for i in agents:
        for k in lay.A(i):
            zeta0[k - 1] = zs[i][lay.local_pos(i, k)]
    trace = AdmmTrace(zeta0, {i: zs[i].copy() for i in agents},
                      {i: lam[i].copy() for i in agents}, [], {})

    z = {}
    for tau in range(params.iterations):
        z = {i: z_update(gammas[i], zs[i], lam[i], p[i]) for i in agents}
        if params.early_stop and tau == params.iterations - 1:
            trace.iterations.append(IterRecord({i: z[i].copy() for i in agents}, complete=False))
            break
        mail = Mailbox()
        for s, r, k in sched.share:
            mail.send(s, r, k, z[s][lay.local_pos(s, k)])
        zeta = np.zeros(lay.nu)
        for i in agents:
            for k in lay.A(i):
                vals = [z[j][lay.local_pos(j, k)] if j == i else mail.recv(j, i, k)
                        for j in users[k]]
                zeta[k - 1] = np.mean(vals)
        mail.close()
        for s, r, k in sched.broadcast:
            mail.send(s, r, k, zeta[k - 1])
        for i in agents:
            zs[i] = np.array([zeta[k - 1] if owners[k] == i else mail.recv(owners[k], i, k)
                              for k in lay.K[i]])
        mail.close()
        lam = {i: lambda_update(params.rho, lam[i], z[i], zs[i]) for i in agents}
        trace.iterations.append(IterRecord({i: z[i].copy() for i in agents},
                                           {i: zs[i].copy() for i in agents},
                                           {i: lam[i].copy() for i in agents}, zeta.copy()))
    trace.alpha = final_alpha(prob, trace, params, init)
    return trace


def final_alpha(prob: ConsensusProblem, trace: AdmmTrace, params: AdmmParams, init) -> dict:
    lay = prob.layout
    if not trace.iterations:
        return {i: np.asarray(init[i], float).reshape(-1).copy() for i in lay.agents}
    last = trace.iterations[-1]
    if not last.complete:
        return {i: last.z[i][:lay.alpha_len[i]].copy() for i in lay.agents}
    return {i: last.zeta_slice[i][:lay.alpha_len[i]].copy() for i in lay.agents}

"""General consensus problems with equality-constrained quadratic local costs.

Agent ``i`` owns the local problem::

    minimize  1/2 z' H z + p' F' z   subject to  G z = E p

over ``z = (alpha, gamma)`` where ``alpha`` holds the agent's own quantities and
``gamma`` copies of neighbors' ``alpha`` entries; ``p = (beta, delta)`` splits
into a private part and an operator-supplied part.  Consensus requires
``z_i = zeta[K_i]`` for one global vector ``zeta``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.linalg as sla

from .graph import CommGraph, GraphError, IndexLayout, validate_locality

INFEASIBLE = math.inf


class ProblemError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AgentCost:
    H: np.ndarray
    F: np.ndarray
    G: np.ndarray
    E: np.ndarray

    def __init__(self, H, F, G=None, E=None):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        v = H.shape[0]
        F = np.asarray(F, dtype=float).reshape(v, -1)
        w = F.shape[1]
        G = np.zeros((0, v)) if G is None else np.asarray(G, dtype=float).reshape(-1, v)
        E = np.zeros((G.shape[0], w)) if E is None else np.asarray(E, dtype=float).reshape(G.shape[0], w)
        for name, val in (("H", H), ("F", F), ("G", G), ("E", E)):
            object.__setattr__(self, name, val)

    @property
    def v(self) -> int:
        return self.H.shape[0]

    @property
    def w(self) -> int:
        return self.F.shape[1]

    @property
    def c(self) -> int:
        return self.G.shape[0]

    def kkt(self, rho: float = 0.0) -> np.ndarray:
        """``[[H + rho I, G'], [G, 0]]``."""
        v, c = self.v, self.c
        return np.block([[self.H + rho * np.eye(v), self.G.T], [self.G, np.zeros((c, c))]])


@dataclass(frozen=True, eq=False)
class StructuredParam:
    beta: np.ndarray
    delta: np.ndarray

    def __init__(self, beta, delta=()):
        object.__setattr__(self, "beta", np.asarray(beta, dtype=float).reshape(-1))
        object.__setattr__(self, "delta", np.asarray(delta, dtype=float).reshape(-1))

    @property
    def p(self) -> np.ndarray:
        return np.concatenate([self.beta, self.delta])

    @property
    def w(self) -> int:
        return self.beta.size + self.delta.size


@dataclass(frozen=True, eq=False)
class ConsensusProblem:
    graph: CommGraph
    layout: IndexLayout
    costs: Mapping[int, AgentCost]
    params: Mapping[int, StructuredParam]

    @property
    def agents(self) -> list[int]:
        return self.layout.agents

    def selector(self, i: int) -> np.ndarray:
        """0/1 matrix ``P_i`` with ``z_i = P_i zeta``."""
        P = np.zeros((self.layout.v(i), self.layout.nu))
        for pos, k in enumerate(self.layout.K[i]):
            P[pos, k - 1] = 1.0
        return P

    def with_params(self, params: Mapping[int, StructuredParam]) -> "ConsensusProblem":
        return ConsensusProblem(self.graph, self.layout, self.costs, params)


@dataclass(frozen=True)
class ProblemReport:
    ok: bool
    issues: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


def _is_pd(H: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return False
    return True


def validate_problem(prob: ConsensusProblem, sym_tol: float = 1e-10) -> ProblemReport:
    issues: list[str] = []
    try:
        loc = validate_locality(prob.graph, prob.layout)
        if not loc:
            issues.extend(loc.describe())
    except GraphError as exc:
        issues.append(str(exc))
    if set(prob.costs) != set(prob.layout.agents) or set(prob.params) != set(prob.layout.agents):
        issues.append("costs, params and layout cover different agents")
        return ProblemReport(False, tuple(issues))
    for i in prob.agents:
        c, par = prob.costs[i], prob.params[i]
        tag = f"agent {i}: "
        if c.v != prob.layout.v(i):
            issues.append(tag + f"H is {c.v}x{c.v} but |K_i| = {prob.layout.v(i)}")
            continue
        if c.w != par.w:
            issues.append(tag + f"F has {c.w} columns but p has {par.w} entries")
            continue
        if not np.allclose(c.H, c.H.T, atol=sym_tol, rtol=0):
            issues.append(tag + "H not symmetric")
        if not _is_pd((c.H + c.H.T) / 2):
            issues.append(tag + "H not positive definite")
        if c.c:
            with warnings.catch_warnings():
                # singularity is reported below instead
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                lu, piv = sla.lu_factor(c.kkt(), check_finite=True)
            d = np.abs(np.diag(lu))
            if d.min() <= 1e-12 * max(1.0, d.max()):
                issues.append(tag + "KKT singular (G lacks full row rank)")
                continue
            rhs = c.E @ par.p
            if np.linalg.matrix_rank(np.column_stack([c.G, rhs])) > np.linalg.matrix_rank(c.G):
                issues.append(tag + "constraints G z = E p are inconsistent")
    return ProblemReport(not issues, tuple(issues))


def eval_cost(c: AgentCost, z, p, feas_tol: float = 1e-9) -> float:
    """Local objective, or :data:`INFEASIBLE` if ``|G z - E p|_inf > feas_tol``."""
    z = np.asarray(z, dtype=float).reshape(-1)
    p = np.asarray(p, dtype=float).reshape(-1)
    if z.size != c.v or p.size != c.w:
        raise ProblemError(f"expected z of size {c.v} and p of size {c.w}")
    if c.c and np.max(np.abs(c.G @ z - c.E @ p)) > feas_tol:
        return INFEASIBLE
    return float(0.5 * z @ c.H @ z + p @ c.F.T @ z)


@dataclass(frozen=True, eq=False)
class CentralSolution:
    zeta: np.ndarray
    z: dict[int, np.ndarray]
    mu: dict[int, np.ndarray]
    kkt_residual: float


def centralized_solve(prob: ConsensusProblem, tol: float = 1e-8) -> CentralSolution:
    """Eliminate the consensus constraints and solve one global KKT system.

    The unknowns are ``zeta`` and the stacked multipliers ``mu_i``; the
    residual of the assembled system is checked against ``tol``.
    """
    nu = prob.layout.nu
    Hg = np.zeros((nu, nu))
    g = np.zeros(nu)
    rows, rhs, sizes = [], [], []
    for i in prob.agents:
        c, p = prob.costs[i], prob.params[i].p
        P = prob.selector(i)
        Hg += P.T @ c.H @ P
        g += P.T @ (c.F @ p)
        rows.append(c.G @ P)
        rhs.append(c.E @ p)
        sizes.append(c.c)
    C = np.vstack(rows) if rows else np.zeros((0, nu))
    m = C.shape[0]
    kkt = np.block([[Hg, C.T], [C, np.zeros((m, m))]])
    b = np.concatenate([-g] + rhs)
    try:
        sol = sla.solve(kkt, b, assume_a="sym")
    except (sla.LinAlgError, ValueError) as exc:
        raise ProblemError(f"global KKT system singular: {exc}") from exc
    res = float(np.max(np.abs(kkt @ sol - b), initial=0.0))
    scale = max(1.0, float(np.max(np.abs(b), initial=0.0)))
    if not np.all(np.isfinite(sol)) or res > tol * scale:
        raise ProblemError(f"global KKT system singular (residual {res:.3g})")
    zeta = sol[:nu]
    z, mu = {}, {}
    off = nu
    for i, ci in zip(prob.agents, sizes):
        z[i] = zeta[np.array(prob.layout.K[i], dtype=int) - 1].copy()
        mu[i] = sol[off:off + ci]
        off += ci
    return CentralSolution(zeta, z, mu, res)

"""Robot formation control posed as a general consensus problem.

Robots are planar double integrators (``dt = 1``) with state
``x = (px, py, vx, vy)``, input ``u`` (accelerations) and output ``y`` (position).
Over a horizon of ``N`` steps agent ``i`` minimizes::

    r |U_i(t) - U_i(t-1)|^2 + sum_{j in N_i} |Y_i - Y_j - D_ij|^2  (+ eta |Y_1 - Y_ref|^2 for the leader)

where ``U_i(t-1)`` is the input sequence shifted back by one step, so the
first term penalizes input increments.  Predicted outputs obey the
condensed dynamics ``Y_i = O x_i + T U_i``, which enters as the equality
constraint.

Layout per agent: ``z_i = (U_i, Y_i, Y_j for neighbors j in ascending order)``,
``alpha_i = (U_i, Y_i)``; ``p_i = (u_i(t-1), x_i(t), D_ij for neighbors j, [Y_ref])``
with ``beta_i = (u_i(t-1), x_i(t))``.  Agent ``i``'s alpha block occupies global
entries ``(i-1)*4N + 1 .. i*4N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .graph import CommGraph, IndexLayout
from .problem import AgentCost, ConsensusProblem, StructuredParam

RIDGE = 1e-6

# stand-in 9-agent topology: central leader 1 with mixed-degree periphery
GENERIC9_EDGES = ((1, 2), (1, 4), (1, 6), (1, 8), (2, 3), (3, 4), (4, 5), (5, 6),
                  (6, 7), (8, 9), (9, 2))


@dataclass(frozen=True, eq=False)
class RobotModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    @classmethod
    def double_integrator(cls, dt: float = 1.0) -> "RobotModel":
        I2, Z2 = np.eye(2), np.zeros((2, 2))
        A = np.block([[I2, dt * I2], [Z2, I2]])
        B = np.vstack([0.5 * dt * dt * I2, dt * I2])
        C = np.hstack([I2, Z2])
        return cls(A, B, C)

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]

    @property
    def ny(self) -> int:
        return self.C.shape[0]


def step_dynamics(m: RobotModel, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(x(t+1), y(t+1))``."""
    xn = m.A @ np.asarray(x, float) + m.B @ np.asarray(u, float)
    return xn, m.C @ xn


@dataclass(frozen=True, eq=False)
class CondensedModel:
    O: np.ndarray
    T: np.ndarray


def condense(m: RobotModel, N: int) -> CondensedModel:
    """``Y = O x + T U`` with ``Y = (y(t+1..t+N))``, ``U = (u(t..t+N-1))``."""
    if N < 1:
        raise ValueError("horizon must be at least 1")
    ny, nu = m.ny, m.nu
    O = np.zeros((N * ny, m.nx))
    T = np.zeros((N * ny, N * nu))
    Ak = np.eye(m.nx)
    powers = [np.eye(m.nx)]
    for _ in range(N):
        Ak = m.A @ Ak
        powers.append(Ak)
    for k in range(1, N + 1):
        O[(k - 1) * ny:k * ny] = m.C @ powers[k]
        for j in range(k):
            T[(k - 1) * ny:k * ny, j * nu:(j + 1) * nu] = m.C @ powers[k - 1 - j] @ m.B
    return CondensedModel(O, T)


@dataclass(frozen=True, eq=False)
class FormationSpec:
    graph: CommGraph
    offsets: np.ndarray          # (M, 2) ideal positions relative to the formation center
    ref: Callable[[int], np.ndarray]  # leader reference y_ref(t)
    N: int = 4
    r: float = 0.1
    eta: float = 10.0
    leader: int = 1
    model: RobotModel = field(default_factory=RobotModel.double_integrator)

    @property
    def M(self) -> int:
        return self.graph.M

    def displacement(self, i: int, j: int, t: int = 0) -> np.ndarray:
        """Desired ``y_i - y_j``; time-invariant here."""
        return self.offsets[i - 1] - self.offsets[j - 1]

    def center(self, t: int) -> np.ndarray:
        return self.ref(t) - self.offsets[self.leader - 1]

    def ideal_positions(self, t: int) -> np.ndarray:
        return self.center(t) + self.offsets

    @property
    def alpha_len(self) -> int:
        return 2 * self.N * self.model.ny

    def layout(self) -> IndexLayout:
        a, half = self.alpha_len, self.N * self.model.ny
        K, al = {}, {}
        for i in self.graph.agents:
            ks = list(range((i - 1) * a + 1, i * a + 1))
            for j in self.graph.neighbors(i):
                ks += list(range((j - 1) * a + half + 1, j * a + 1))
            K[i], al[i] = ks, a
        return IndexLayout(self.M * a, K, al)


@dataclass(frozen=True, eq=False)
class AgentSetup:
    cost: AgentCost
    param: StructuredParam
    neighbors: tuple[int, ...]
    # gamma block g copies Y of agent neighbors[g]


def _stack_ref(spec: FormationSpec, t: int) -> np.ndarray:
    return np.concatenate([spec.ref(t + k) for k in range(1, spec.N + 1)])


def _stack_disp(spec: FormationSpec, i: int, j: int, t: int) -> np.ndarray:
    return np.concatenate([spec.displacement(i, j, t + k) for k in range(1, spec.N + 1)])


def agent_cost(spec: FormationSpec, i: int, cm: CondensedModel | None = None) -> AgentCost:
    """Quadratic form of the local cost; independent of time."""
    cm = cm or condense(spec.model, spec.N)
    N, nu, ny = spec.N, spec.model.nu, spec.model.ny
    nbrs = spec.graph.neighbors(i)
    nU, nY = N * nu, N * ny
    v = nU + nY * (1 + len(nbrs))
    leader = i == spec.leader
    w = nu + spec.model.nx + nY * len(nbrs) + (nY if leader else 0)

    # every term is weight * |Mz z - Mp p|^2
    terms = []
    Dif = np.eye(nU) - np.eye(nU, k=-nu)
    Mz = np.zeros((nU, v))
    Mz[:, :nU] = Dif
    Mp = np.zeros((nU, w))
    Mp[:nu, :nu] = np.eye(nu)
    terms.append((spec.r, Mz, Mp))
    for g, j in enumerate(nbrs):
        Mz = np.zeros((nY, v))
        Mz[:, nU:nU + nY] = np.eye(nY)
        Mz[:, nU + nY * (g + 1):nU + nY * (g + 2)] = -np.eye(nY)
        Mp = np.zeros((nY, w))
        off = nu + spec.model.nx + g * nY
        Mp[:, off:off + nY] = np.eye(nY)
        terms.append((1.0, Mz, Mp))
    if leader:
        Mz = np.zeros((nY, v))
        Mz[:, nU:nU + nY] = np.eye(nY)
        Mp = np.zeros((nY, w))
        Mp[:, w - nY:] = np.eye(nY)
        terms.append((spec.eta, Mz, Mp))
    H = sum(2 * wt * Mz.T @ Mz for wt, Mz, _ in terms) + RIDGE * np.eye(v)
    F = sum(-2 * wt * Mz.T @ Mp for wt, Mz, Mp in terms)

    G = np.zeros((nY, v))
    G[:, :nU] = -cm.T
    G[:, nU:nU + nY] = np.eye(nY)
    E = np.zeros((nY, w))
    E[:, nu:nu + spec.model.nx] = cm.O
    return AgentCost(H, F, G, E)


def agent_param(spec: FormationSpec, i: int, t: int, x_i, u_prev_i) -> StructuredParam:
    beta = np.concatenate([np.asarray(u_prev_i, float), np.asarray(x_i, float)])
    delta = [_stack_disp(spec, i, j, t) for j in spec.graph.neighbors(i)]
    if i == spec.leader:
        delta.append(_stack_ref(spec, t))
    return StructuredParam(beta, np.concatenate(delta) if delta else [])


def build_agent_cost(spec: FormationSpec, i: int, t: int, x_i, u_prev_i) -> AgentSetup:
    return AgentSetup(agent_cost(spec, i), agent_param(spec, i, t, x_i, u_prev_i),
                      tuple(spec.graph.neighbors(i)))


def formation_cost(spec: FormationSpec, i: int, t: int, z, x_i, u_prev_i) -> float:
    """Direct evaluation of the local objective (without the ridge) for testing."""
    N, nu, ny = spec.N, spec.model.nu, spec.model.ny
    nU, nY = N * nu, N * ny
    z = np.asarray(z, float)
    U, Y = z[:nU], z[nU:nU + nY]
    Uprev = np.concatenate([np.asarray(u_prev_i, float), U[:nU - nu]])
    val = spec.r * np.sum((U - Uprev) ** 2)
    for g, j in enumerate(spec.graph.neighbors(i)):
        Yj = z[nU + nY * (g + 1):nU + nY * (g + 2)]
        val += np.sum((Y - Yj - _stack_disp(spec, i, j, t)) ** 2)
    if i == spec.leader:
        val += spec.eta * np.sum((Y - _stack_ref(spec, t)) ** 2)
    return float(val)


def build_problem(spec: FormationSpec, t: int, x: Mapping[int, np.ndarray],
                  u_prev: Mapping[int, np.ndarray],
                  costs: Mapping[int, AgentCost] | None = None) -> ConsensusProblem:
    if costs is None:
        cm = condense(spec.model, spec.N)
        costs = {i: agent_cost(spec, i, cm) for i in spec.graph.agents}
    params = {i: agent_param(spec, i, t, x[i], u_prev[i]) for i in spec.graph.agents}
    return ConsensusProblem(spec.graph, spec.layout(), costs, params)


def initial_guess(spec: FormationSpec, y0: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Zero inputs and the current position repeated over the horizon."""
    nU = spec.N * spec.model.nu
    return {i: np.concatenate([np.zeros(nU), np.tile(np.asarray(y0[i], float), spec.N)])
            for i in spec.graph.agents}


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True, eq=False)
class Scenario:
    kind: str
    spec: FormationSpec
    x0: dict[int, np.ndarray]
    rho: float = 0.2
    iterations: int = 5
    T: int = 20
    seed: int = 0


def octagon(radius: float = 10.0, count: int = 8) -> np.ndarray:
    ang = 2 * np.pi * np.arange(count) / count
    return radius * np.column_stack([np.cos(ang), np.sin(ang)])


SCENARIOS = ("ring8", "star9", "generic9")


def scenario(kind: str, seed: int = 0, **overrides) -> Scenario:
    """Build one of the three formation experiments with seeded initial positions.

    ``overrides`` may set ``N``, ``r``, ``eta``, ``rho``, ``iterations``, ``T``
    and ``radius``.
    """
    radius = float(overrides.pop("radius", 10.0))
    spec_kw = {k: overrides.pop(k) for k in ("N", "r", "eta") if k in overrides}
    if kind == "ring8":
        graph = CommGraph.ring(8)
        offsets = octagon(radius)

        def ref(t):
            return np.array([radius + t, 0.0])
    elif kind in ("star9", "generic9"):
        graph = CommGraph.star(9) if kind == "star9" else CommGraph(9, GENERIC9_EDGES)
        offsets = np.vstack([np.zeros(2), octagon(radius)])

        def ref(t):
            return np.array([float(t), 0.0])
    else:
        raise ValueError(f"unknown scenario {kind!r}; choose from {SCENARIOS}")
    spec = FormationSpec(graph, offsets, ref, **spec_kw)
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-10.0, 10.0, size=(graph.M, 2))
    x0 = {i: np.concatenate([pos[i - 1], np.zeros(2)]) for i in graph.agents}
    extra = {k: overrides.pop(k) for k in ("rho", "iterations", "T") if k in overrides}
    if overrides:
        raise ValueError(f"unknown scenario overrides {sorted(overrides)}")
    return Scenario(kind, spec, x0, seed=seed, **extra)


# ---------------------------------------------------------------------------
# receding-horizon loop

AlphaSolver = Callable[[int, ConsensusProblem, dict], dict]


@dataclass(eq=False)
class ClosedLoopResult:
    y: np.ndarray        # (T+1, M, 2) positions y(0..T)
    u: np.ndarray        # (T, M, 2) applied inputs
    alpha: list[dict]    # alpha_i^ell per step


def closed_loop(sc: Scenario, solve: AlphaSolver, T: int | None = None) -> ClosedLoopResult:
    """Apply the first input of each agent's alpha block and step the robots.

    ``solve(t, problem, guesses)`` returns ``alpha_i`` for every agent; the
    guesses are the default initial guess at ``t = 0`` and the previous
    ``alpha`` afterwards.
    """
    spec = sc.spec
    T = sc.T if T is None else T
    m = spec.model
    agents = list(spec.graph.agents)
    cm = condense(m, spec.N)
    costs = {i: agent_cost(spec, i, cm) for i in agents}
    x = {i: sc.x0[i].copy() for i in agents}
    u_prev = {i: np.zeros(m.nu) for i in agents}
    ys = [np.array([m.C @ x[i] for i in agents])]
    us, alphas = [], []
    guess = initial_guess(spec, {i: m.C @ x[i] for i in agents})
    for t in range(T):
        prob = build_problem(spec, t, x, u_prev, costs)
        alpha = solve(t, prob, guess)
        alphas.append({i: np.asarray(alpha[i], float).copy() for i in agents})
        step_u = {i: np.asarray(alpha[i][:m.nu], float) for i in agents}
        us.append(np.array([step_u[i] for i in agents]))
        for i in agents:
            x[i], _ = step_dynamics(m, x[i], step_u[i])
        u_prev = step_u
        ys.append(np.array([m.C @ x[i] for i in agents]))
        guess = {i: alphas[-1][i] for i in agents}
    return ClosedLoopResult(np.array(ys), np.array(us).reshape(T, len(agents), m.nu), alphas)


def formation_error(sc: Scenario, y_final: np.ndarray) -> float:
    """Max over agents of ``|(y_i - y_leader) - (offset_i - offset_leader)|_2``."""
    spec = sc.spec
    lead = spec.leader - 1
    rel = y_final - y_final[lead]
    ideal = spec.offsets - spec.offsets[lead]
    return float(np.max(np.linalg.norm(rel - ideal, axis=1)))

"""Problem generators and independent oracles shared by the test modules."""

from __future__ import annotations

import numpy as np

from encadmm.graph import CommGraph, IndexLayout
from encadmm.problem import AgentCost, ConsensusProblem, StructuredParam


def random_pd(rng, n, lo=0.5, hi=2.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Q @ np.diag(rng.uniform(lo, hi, n)) @ Q.T


def random_problem(rng, max_agents=4, max_v=6, constraints=True) -> ConsensusProblem:
    """Connected graph, stacked alpha layout, PD costs, optional one constraint per agent."""
    M = int(rng.integers(1, max_agents + 1))
    edges = {(i, i + 1) for i in range(1, M)}
    for i in range(1, M + 1):
        for j in range(i + 2, M + 1):
            if rng.random() < 0.4:
                edges.add((i, j))
    g = CommGraph(M, edges)
    alen = {i: int(rng.integers(1, 3)) for i in g.agents}
    start, blocks = 1, {}
    for i in g.agents:
        blocks[i] = list(range(start, start + alen[i]))
        start += alen[i]
    nu = start - 1
    K = {}
    for i in g.agents:
        ks = list(blocks[i])
        for j in g.neighbors(i):
            for k in blocks[j]:
                if len(ks) < max_v and rng.random() < 0.6:
                    ks.append(k)
        K[i] = ks
    # every entry needs at least its owner, which the stacked layout guarantees
    lay = IndexLayout(nu, K, alen)
    costs, params = {}, {}
    for i in g.agents:
        v = len(K[i])
        nb, nd = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        w = nb + nd
        H = random_pd(rng, v)
        F = rng.standard_normal((v, w))
        if constraints and v > 1 and rng.random() < 0.5:
            G = rng.standard_normal((1, v))
            E = rng.standard_normal((1, w))
            costs[i] = AgentCost(H, F, G, E)
        else:
            costs[i] = AgentCost(H, F)
        params[i] = StructuredParam(rng.standard_normal(nb), rng.standard_normal(nd))
    return ConsensusProblem(g, lay, costs, params)


def scalar_pair(c1=1.0, c2=3.0) -> ConsensusProblem:
    """Two agents, one shared scalar owned by agent 1: f_i = (z - c_i)^2 / 2 up to constants.

    Agent 2 owns a second scalar nobody else uses, so that every agent has
    a nonempty alpha block.
    """
    g = CommGraph(2, [(1, 2)])
    lay = IndexLayout(2, {1: [1], 2: [2, 1]}, {1: 1, 2: 1})
    costs = {1: AgentCost([[1.0]], [[-1.0]]),
             2: AgentCost(np.eye(2), [[0.0], [-1.0]])}
    params = {1: StructuredParam([c1]), 2: StructuredParam([c2])}
    return ConsensusProblem(g, lay, costs, params)

"""Communication graph and the index sets tying local variables to the global one.

Agent ids and global entry indices are 1-based throughout the public API.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class CommGraph:
    """Undirected graph on agents ``1..M``."""

    M: int
    edges: frozenset = field(default_factory=frozenset)

    def __init__(self, M: int, edges: Iterable[tuple[int, int]] = ()):
        if M < 1:
            raise GraphError("agent count must be positive")
        norm = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise GraphError(f"self-loop at agent {i}")
            for a in (i, j):
                if not 1 <= a <= M:
                    raise GraphError(f"agent id {a} outside 1..{M}")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "M", int(M))
        object.__setattr__(self, "edges", frozenset(norm))

    @property
    def agents(self) -> range:
        return range(1, self.M + 1)

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edges

    def neighbors(self, i: int) -> list[int]:
        return neighbors(self, i)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    @classmethod
    def ring(cls, M: int) -> "CommGraph":
        if M < 3:
            return cls(M, [(1, 2)] if M == 2 else [])
        return cls(M, [(k, k % M + 1) for k in range(1, M + 1)])

    @classmethod
    def star(cls, M: int, hub: int = 1) -> "CommGraph":
        return cls(M, [(hub, j) for j in range(1, M + 1) if j != hub])


def neighbors(g: CommGraph, i: int) -> list[int]:
    if not 1 <= i <= g.M:
        raise GraphError(f"unknown agent {i}")
    return sorted(b if a == i else a for a, b in g.edges if i in (a, b))


@dataclass(frozen=True)
class IndexLayout:
    """Ordered index lists ``K[i]`` into the global vector of length ``nu``.

    ``A[i]`` (averaging responsibility) is the first ``alpha_len[i]`` entries
    of ``K[i]``.  Lists are stored per agent as tuples keyed by 1-based id.
    """

    nu: int
    K: Mapping[int, tuple[int, ...]]
    alpha_len: Mapping[int, int]

    def __init__(self, nu: int, K: Mapping[int, Sequence[int]], alpha_len: Mapping[int, int]):
        object.__setattr__(self, "nu", int(nu))
        object.__setattr__(self, "K", {int(i): tuple(int(k) for k in ks) for i, ks in K.items()})
        object.__setattr__(self, "alpha_len", {int(i): int(a) for i, a in alpha_len.items()})
        self._check()

    def _check(self) -> None:
        if self.nu < 1:
            raise GraphError("global dimension must be positive")
        if set(self.K) != set(self.alpha_len):
            raise GraphError("K and alpha_len cover different agents")
        seen: dict[int, int] = {}
        for i, ks in self.K.items():
            if len(set(ks)) != len(ks):
                raise GraphError(f"K[{i}] has repeated entries")
            if any(not 1 <= k <= self.nu for k in ks):
                raise GraphError(f"K[{i}] leaves 1..{self.nu}")
            if not 0 <= self.alpha_len[i] <= len(ks):
                raise GraphError(f"alpha_len[{i}] out of range")
            for k in ks[:self.alpha_len[i]]:
                if k in seen:
                    raise GraphError(f"entry {k} averaged by agents {seen[k]} and {i}")
                seen[k] = i
        missing = set(range(1, self.nu + 1)) - set(seen)
        if missing:
            raise GraphError(f"entries {sorted(missing)} have no averaging agent")

    @property
    def agents(self) -> list[int]:
        return sorted(self.K)

    def A(self, i: int) -> tuple[int, ...]:
        return self.K[i][:self.alpha_len[i]]

    def v(self, i: int) -> int:
        return len(self.K[i])

    def owner(self, k: int) -> int:
        for i in self.agents:
            if k in self.A(i):
                return i
        raise GraphError(f"entry {k} has no owner")

    def owners(self) -> dict[int, int]:
        return {k: i for i in self.agents for k in self.A(i)}

    def local_pos(self, i: int, k: int) -> int:
        """0-based position of global entry ``k`` inside ``z_i``."""
        return self.K[i].index(k)


def responsibility_sets(layout: IndexLayout) -> dict[int, list[int]]:
    """``k -> sorted agents whose K contains k`` for every global entry."""
    users: dict[int, list[int]] = {k: [] for k in range(1, layout.nu + 1)}
    for i in layout.agents:
        for k in layout.K[i]:
            users[k].append(i)
    empty = [k for k, v in users.items() if not v]
    if empty:
        raise GraphError(f"entries {empty} are used by no agent")
    return {k: sorted(v) for k, v in users.items()}


@dataclass(frozen=True)
class LocalityReport:
    ok: bool
    violations: tuple[tuple[int, int, tuple[int, ...]], ...] = ()  # (k, owner, unreachable users)

    def __bool__(self) -> bool:
        return self.ok

    def describe(self) -> list[str]:
        return [f"entry {k}: owner {i} cannot reach agents {list(bad)}"
                for k, i, bad in self.violations]


def validate_locality(g: CommGraph, layout: IndexLayout) -> LocalityReport:
    """Every entry's averaging agent must be adjacent to all other users of that entry."""
    users = responsibility_sets(layout)
    bad = []
    for k in range(1, layout.nu + 1):
        i = layout.owner(k)
        if i > g.M:
            bad.append((k, i, tuple(users[k])))
            continue
        reach = set(neighbors(g, i)) | {i}
        off = tuple(j for j in users[k] if j not in reach)
        if off:
            bad.append((k, i, off))
    return LocalityReport(not bad, tuple(bad))

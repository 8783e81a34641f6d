"""Gossip topologies, mixing matrices and graph Laplacians.

Matrices are plain dense ``numpy`` arrays; networks in this package stay
small (a few hundred agents at most) so sparsity buys nothing.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MAX_RESAMPLES = 1000
STOCHASTIC_TOL = 1e-12


class DisconnectedGraphError(ValueError):
    pass


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on agents ``0..n-1``."""

    n: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"agent count must be >= 1, got {self.n}")
        normalized = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop at agent {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n}")
            normalized.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(normalized))

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "Graph":
        edges = list(edges)
        keys = [(min(i, j), max(i, j)) for i, j in edges]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate edge in edge list")
        return cls(n, frozenset(keys))

    @classmethod
    def complete(cls, n: int) -> "Graph":
        return cls(n, frozenset((i, j) for i in range(n) for j in range(i + 1, n)))

    @classmethod
    def ring(cls, n: int) -> "Graph":
        if n < 3:
            return cls.path(n)
        return cls(n, frozenset((min(i, (i + 1) % n), max(i, (i + 1) % n)) for i in range(n)))

    @classmethod
    def path(cls, n: int) -> "Graph":
        return cls(n, frozenset((i, i + 1) for i in range(n - 1)))

    @classmethod
    def star(cls, n: int) -> "Graph":
        return cls(n, frozenset((0, i) for i in range(1, n)))

    def neighbors(self) -> list[set[int]]:
        nbrs: list[set[int]] = [set() for _ in range(self.n)]
        for i, j in self.edges:
            nbrs[i].add(j)
            nbrs[j].add(i)
        return nbrs

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def is_connected(self) -> bool:
        nbrs = self.neighbors()
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.n

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)


def erdos_renyi(n: int, p: float, seed: int, max_retries: int = MAX_RESAMPLES) -> Graph:
    """Sample a connected G(n, p) graph.

    Each attempt draws every pair ``i < j`` in lexicographic order from a
    generator keyed by ``(seed, attempt)``; disconnected draws are discarded.
    """
    if n < 2:
        raise ValueError(f"erdos_renyi needs n >= 2, got {n}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"edge probability must lie in [0, 1], got {p}")
    iu, ju = np.triu_indices(n, k=1)
    for attempt in range(max_retries):
        rng = np.random.default_rng([seed, attempt])
        keep = rng.random(iu.size) < p
        g = Graph(n, frozenset(zip(iu[keep].tolist(), ju[keep].tolist())))
        if g.is_connected():
            return g
    raise DisconnectedGraphError(
        f"no connected Erdos-Renyi graph with n={n}, p={p} after {max_retries} retries"
    )


def laplacian(g: Graph) -> np.ndarray:
    """Sum of ``(e_i - e_j)(e_i - e_j)^T`` over the edges of ``g``."""
    L = np.zeros((g.n, g.n))
    for i, j in g.edges:
        L[i, i] += 1.0
        L[j, j] += 1.0
        L[i, j] -= 1.0
        L[j, i] -= 1.0
    return L


def metropolis_hastings(g: Graph, rule: str = "symmetric") -> np.ndarray:
    """Metropolis-Hastings gossip weights for a connected graph.

    ``rule="symmetric"`` uses ``1 / (1 + max(d_i, d_j))`` on every edge and is
    doubly stochastic on any graph. ``rule="degree"`` uses ``1 / (d_i + 1)``,
    which is only doubly stochastic on regular graphs; irregular graphs are
    rejected rather than silently returned row-stochastic.
    """
    if not g.is_connected():
        raise DisconnectedGraphError(f"mixing weights need a connected graph (n={g.n})")
    deg = g.degrees()
    W = np.zeros((g.n, g.n))
    for i, j in g.edges:
        if rule == "symmetric":
            W[i, j] = W[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
        elif rule == "degree":
            W[i, j] = 1.0 / (deg[i] + 1.0)
            W[j, i] = 1.0 / (deg[j] + 1.0)
        else:
            raise ValueError(f"unknown weight rule {rule!r}")
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    check_mixing_matrix(W, g)
    return W


def check_mixing_matrix(W: np.ndarray, g: Graph | None = None, tol: float = STOCHASTIC_TOL) -> None:
    """Raise ``ValueError`` unless ``W`` is doubly stochastic (and supported on ``g``)."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"mixing matrix must be square, got shape {W.shape}")
    row_err = np.max(np.abs(W.sum(axis=1) - 1.0))
    col_err = np.max(np.abs(W.sum(axis=0) - 1.0))
    if row_err > tol or col_err > tol:
        raise ValueError(
            f"mixing matrix is not doubly stochastic (row error {row_err:.3g}, column error {col_err:.3g})"
        )
    if g is not None:
        if W.shape[0] != g.n:
            raise ValueError(f"mixing matrix has size {W.shape[0]} but graph has {g.n} agents")
        mask = np.ones_like(W, dtype=bool)
        np.fill_diagonal(mask, False)
        for i, j in g.edges:
            mask[i, j] = mask[j, i] = False
        if np.any(W[mask] != 0.0):
            raise ValueError("mixing matrix has weight on a non-edge")


def spectral_gap(W: np.ndarray) -> float:
    """Second largest eigenvalue of ``W^T W``."""
    W = np.asarray(W, dtype=float)
    if W.shape[0] < 2:
        return 0.0
    try:
        eig = np.linalg.eigvalsh(W.T @ W)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigensolver failed on W^T W: {exc}") from exc
    return float(max(eig[-2], 0.0))


def write_edge_list(g: Graph, path: str | Path) -> None:
    lines = [str(g.n)] + [f"{i} {j}" for i, j in g.sorted_edges()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path: str | Path) -> Graph:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows or len(rows[0]) != 1:
        raise ValueError(f"{path}: first line must hold the agent count")
    n = int(rows[0][0])
    edges = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'i j', got {' '.join(row)!r}")
        edges.append((int(row[0]), int(row[1])))
    return Graph.from_edges(n, edges)

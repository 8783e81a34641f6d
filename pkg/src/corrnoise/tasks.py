"""Learning objectives, LIBSVM ingestion and non-iid data partitioning.

Every task exposes the same small surface used by the engine:

* ``n`` agents and parameter dimension ``dim``;
* ``gradients(X, seed, t)`` returning the ``n x dim`` array of local
  stochastic gradients at states ``X`` for iteration ``t``;
* ``metrics(X)`` returning a ``{name: value}`` dict evaluated on states ``X``.

Agents are indexed ``0..n-1`` in code. The quadratic task follows the
1-based convention of its definition: agent ``k`` plays the role of
``i = k + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.special import expit

from .covariance import GRADIENT_STREAM, counter_generator

QUAD_CURVATURE = (15.0, 1.0)
DEFAULT_L2_REG = 1e-4
BATCH_SIZE = 128
MAX_PARTITION_RETRIES = 100


# ---------------------------------------------------------------- quadratic


def rotation(theta_deg: float) -> np.ndarray:
    """Counter-clockwise 2-D rotation by ``theta_deg`` degrees."""
    a = math.radians(theta_deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


@dataclass
class QuadraticTask:
    """Heterogeneous strongly convex quadratics on the plane.

    ``f_i(x) = z^T diag(15, 1) z`` with ``z = Q_i (x - m_i)``. Agents
    ``i <= n/2`` have ``m_i = (-i, 0)`` and ``Q_i = I``; the rest have
    ``m_i = (i, 0)`` and ``Q_i`` the rotation by ``theta`` degrees.
    """

    n: int
    theta: float = 15.0
    minimizers: np.ndarray = field(init=False, repr=False)
    curvatures: np.ndarray = field(init=False, repr=False)
    rotations: np.ndarray = field(init=False, repr=False)
    _optimum: tuple | None = field(init=False, repr=False, default=None)

    dim = 2

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"agent count must be >= 1, got {self.n}")
        A = np.diag(QUAD_CURVATURE)
        half = self.n // 2
        idx = np.arange(1, self.n + 1, dtype=float)
        self.minimizers = np.column_stack([np.where(idx <= half, -idx, idx), np.zeros(self.n)])
        Q = rotation(self.theta)
        self.rotations = np.stack([np.eye(2) if i <= half else Q for i in range(1, self.n + 1)])
        # A_i = Q_i^T A Q_i so that f_i(x) = (x - m_i)^T A_i (x - m_i)
        self.curvatures = np.einsum("kji,jl,klm->kim", self.rotations, A, self.rotations)

    def objective(self, i: int, x: np.ndarray) -> float:
        """``f_i(x)`` for the 0-based agent index ``i``."""
        r = np.asarray(x, dtype=float) - self.minimizers[i]
        return float(r @ self.curvatures[i] @ r)

    def local_values(self, X: np.ndarray) -> np.ndarray:
        """``f_i(x_i)`` for every agent."""
        R = np.asarray(X, dtype=float) - self.minimizers
        return np.einsum("ki,kij,kj->k", R, self.curvatures, R)

    def average_objective(self, x: np.ndarray) -> float:
        """``F(x) = (1/n) sum_i f_i(x)`` at one point."""
        R = np.asarray(x, dtype=float)[None, :] - self.minimizers
        return float(np.einsum("ki,kij,kj->", R, self.curvatures, R)) / self.n

    def gradients(self, X: np.ndarray, seed: int = 0, t: int = 0) -> np.ndarray:
        R = np.asarray(X, dtype=float) - self.minimizers
        return 2.0 * np.einsum("kij,kj->ki", self.curvatures, R)

    def optimum(self) -> tuple[np.ndarray, float]:
        """Global minimizer ``x*`` and value ``f*`` of the average objective."""
        if self._optimum is None:
            self._optimum = self._solve_optimum()
        return self._optimum

    def _solve_optimum(self) -> tuple[np.ndarray, float]:
        H = self.curvatures.sum(axis=0)
        rhs = np.einsum("kij,kj->i", self.curvatures, self.minimizers)
        if abs(np.linalg.det(H)) < 1e-12 * max(1.0, float(np.abs(H).max()) ** 2):
            raise np.linalg.LinAlgError("normal matrix of the quadratic task is singular")
        x_star = np.linalg.solve(H, rhs)
        return x_star, self.average_objective(x_star)

    def metrics(self, X: np.ndarray) -> dict:
        return {"opt_gap": quadratic_opt_gap(X, self), "consensus_error": consensus_error(X)}


def quadratic_objective(i: int, x: np.ndarray, task: QuadraticTask) -> float:
    """``f_i(x)`` with the 1-based agent index ``i``."""
    if not 1 <= i <= task.n:
        raise ValueError(f"agent index {i} out of range 1..{task.n}")
    return task.objective(i - 1, x)


def quadratic_opt_gap(states: np.ndarray, task: QuadraticTask, mode: str = "global") -> float:
    """Optimality gap of agent states ``states`` (``n x 2``).

    ``mode="global"`` averages the network objective over the agents'
    iterates, ``(1/n) sum_i F(x_i) - f*``, which is never negative.
    ``mode="local"`` is ``(1/n) sum_i f_i(x_i) - f*``; it coincides with the
    global form at consensus but can dip below zero when agents disagree and
    each sits near its own minimizer.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    _, f_star = task.optimum()
    if mode == "global":
        return float(np.mean([task.average_objective(x) for x in X])) - f_star
    if mode == "local":
        return float(task.local_values(X).mean()) - f_star
    raise ValueError(f"unknown gap mode {mode!r}")


def consensus_error(X: np.ndarray) -> float:
    """Mean squared distance of the agents to their average."""
    X = np.asarray(X, dtype=float)
    return float(np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1)))


@dataclass
class ZeroGradientTask:
    """Constant objective: every gradient is zero. Used to isolate noise."""

    n: int
    dim: int = 1

    def gradients(self, X, seed: int = 0, t: int = 0) -> np.ndarray:
        return np.zeros((self.n, self.dim))

    def metrics(self, X) -> dict:
        return {"consensus_error": consensus_error(X)}


# ---------------------------------------------------------------- LIBSVM


class LibsvmParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def parse_libsvm(lines: Iterable[str], dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read ``label idx:val ...`` lines into a dense matrix and +-1 labels.

    Indices are 1-based and strictly increasing within a line. Labels
    ``+1``/``1`` map to +1 and ``-1``/``0`` map to -1. Blank lines are
    skipped. With ``dim=None`` the width is the largest index seen.
    """
    labels, rows = [], []
    width = 0
    for lineno, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        tokens = text.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise LibsvmParseError(lineno, f"non-numeric label {tokens[0]!r}") from None
        if label not in (-1.0, 0.0, 1.0):
            raise LibsvmParseError(lineno, f"label {tokens[0]!r} is not binary")
        entries = []
        last = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise LibsvmParseError(lineno, f"expected idx:val, got {tok!r}")
            try:
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise LibsvmParseError(lineno, f"non-numeric token {tok!r}") from None
            if idx <= last:
                raise LibsvmParseError(lineno, f"index {idx} does not increase (previous {last})")
            if dim is not None and idx > dim:
                raise LibsvmParseError(lineno, f"index {idx} exceeds dimension {dim}")
            entries.append((idx, val))
            last = idx
        width = max(width, last)
        labels.append(1.0 if label > 0 else -1.0)
        rows.append(entries)
    d = width if dim is None else dim
    X = np.zeros((len(rows), d))
    for r, entries in enumerate(rows):
        for idx, val in entries:
            X[r, idx - 1] = val
    return X, np.array(labels)


def read_libsvm(path: str | Path, dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        return parse_libsvm(fh, dim)


def format_libsvm(X: np.ndarray, y: np.ndarray) -> list[str]:
    """Inverse of ``parse_libsvm`` for dense input; zeros are omitted."""
    out = []
    for row, label in zip(np.asarray(X, dtype=float), np.asarray(y)):
        parts = ["+1" if label > 0 else "-1"]
        parts += [f"{j + 1}:{format(float(v), '.17g')}" for j in np.flatnonzero(row) for v in (row[j],)]
        out.append(" ".join(parts))
    return out


def write_libsvm(X: np.ndarray, y: np.ndarray, path: str | Path) -> None:
    Path(path).write_text("\n".join(format_libsvm(X, y)) + "\n")


def bundled_a9a_excerpt() -> Path:
    """Path of the 200-line a9a-format excerpt shipped with the package."""
    return Path(__file__).with_name("data") / "a9a_excerpt.txt"


# ---------------------------------------------------------------- partitioning


@dataclass(frozen=True)
class DirichletPartition:
    alpha: float
    seed: int
    assignment: np.ndarray = field(repr=False)
    n_agents: int = 1

    def shards(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == k) for k in range(self.n_agents)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_agents)

    def to_csv(self, path: str | Path) -> None:
        lines = ["sample_index,agent_id"] + [f"{i},{a}" for i, a in enumerate(self.assignment)]
        Path(path).write_text("\n".join(lines) + "\n")


def dirichlet_partition(labels: np.ndarray, n_agents: int, alpha: float, seed: int,
                        max_retries: int = MAX_PARTITION_RETRIES) -> DirichletPartition:
    """Per-class Dirichlet(alpha) split of samples among ``n_agents``.

    For each class, agent proportions come from ``Dirichlet(alpha * 1)`` and
    each sample of the class goes to an agent drawn from those proportions.
    A draw that leaves some agent empty is discarded and redrawn with the
    next sub-seed.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if n_agents < 1:
        raise ValueError(f"n_agents must be >= 1, got {n_agents}")
    labels = np.asarray(labels)
    if labels.size < n_agents:
        raise ValueError(f"{labels.size} samples cannot fill {n_agents} non-empty shards")
    classes = np.unique(labels)
    for attempt in range(max_retries):
        rng = np.random.default_rng([seed, attempt])
        assignment = np.empty(labels.size, dtype=int)
        for c in classes:
            idx = np.flatnonzero(labels == c)
            props = rng.dirichlet(np.full(n_agents, float(alpha)))
            assignment[idx] = rng.choice(n_agents, size=idx.size, p=props)
        if np.bincount(assignment, minlength=n_agents).min() > 0:
            return DirichletPartition(float(alpha), seed, assignment, n_agents)
    raise RuntimeError(f"no partition without empty shards after {max_retries} draws (alpha={alpha})")


def train_test_split(n_samples: int, seed: int, test_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled index split; the test part holds ``round(test_fraction * n)`` samples."""
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n_samples)
    n_test = int(round(test_fraction * n_samples))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# ---------------------------------------------------------------- logistic


def logistic_loss(x: np.ndarray, features: np.ndarray, labels: np.ndarray, l2_reg: float = 0.0) -> float:
    margins = labels * (features @ x)
    loss = float(np.mean(np.logaddexp(0.0, -margins)))
    return loss + 0.5 * l2_reg * float(x @ x) if l2_reg else loss


def logistic_gradient(x: np.ndarray, features: np.ndarray, labels: np.ndarray, l2_reg: float = DEFAULT_L2_REG) -> np.ndarray:
    """Gradient of the mean logistic loss plus ``(l2_reg / 2) |x|^2``."""
    features = np.atleast_2d(features)
    labels = np.atleast_1d(labels)
    if labels.size == 0:
        raise ValueError("batch must be non-empty")
    margins = labels * (features @ x)
    # d/dm log(1 + e^-m) = -sigmoid(-m), evaluated without overflow by expit
    coef = -labels * expit(-margins)
    return features.T @ coef / labels.size + l2_reg * x


@dataclass
class LogisticTask:
    """Regularized logistic regression with one data shard per agent."""

    features: np.ndarray
    labels: np.ndarray
    partition: DirichletPartition
    test_features: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    l2_reg: float = DEFAULT_L2_REG
    batch_size: int = BATCH_SIZE
    _shards: list = field(init=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.features.shape[0] != self.labels.size:
            raise ValueError("features and labels disagree on the sample count")
        if self.partition.assignment.size != self.labels.size:
            raise ValueError("partition does not cover the training samples")
        self._shards = self.partition.shards()

    @property
    def n(self) -> int:
        return self.partition.n_agents

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def gradients(self, X: np.ndarray, seed: int, t: int) -> np.ndarray:
        G = np.empty_like(np.asarray(X, dtype=float))
        for i, shard in enumerate(self._shards):
            # sub-seed (seed, agent, t): every algorithm sees the same batches
            rng = counter_generator(seed, t, GRADIENT_STREAM, lane=i)
            batch = shard[rng.integers(0, shard.size, size=self.batch_size)]
            G[i] = logistic_gradient(X[i], self.features[batch], self.labels[batch], self.l2_reg)
        return G

    def metrics(self, X: np.ndarray) -> dict:
        X = np.asarray(X, dtype=float)
        out = {"consensus_error": consensus_error(X)}
        if self.test_features is not None and self.test_labels is not None and self.test_labels.size:
            losses = [logistic_loss(x, self.test_features, self.test_labels) for x in X]
            acc = [float(np.mean(np.sign(self.test_features @ x) == self.test_labels)) for x in X]
            out["test_loss"] = float(np.mean(losses))
            out["test_accuracy"] = float(np.mean(acc))
        return out


def logistic_task_from_file(path: str | Path, n_agents: int, alpha: float = 10.0, seed: int = 0,
                            dim: int | None = 123, l2_reg: float = DEFAULT_L2_REG,
                            batch_size: int = BATCH_SIZE) -> LogisticTask:
    """80-20 split first, then a Dirichlet partition of the training part."""
    X, y = read_libsvm(path, dim)
    train, test = train_test_split(y.size, seed)
    part = dirichlet_partition(y[train], n_agents, alpha, seed)
    return LogisticTask(X[train], y[train], part, X[test], y[test], l2_reg, batch_size)

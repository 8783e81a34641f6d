"""Synchronous simulation of noisy decentralized SGD.

One iteration, for all agents at once::

    G_hat = clip(G, C)                 # per-agent gradient clipping
    V     = F S                        # correlated privacy noise, one column per coordinate
    X     = W (X - eta_t (G_hat + V))  # local step followed by gossip

``X``, ``G`` and ``V`` are ``n x d`` arrays. The step size is
``eta_t = eta1 / sqrt(t + 1)`` for the 0-based loop index ``t`` (so the
first step uses ``eta1``), or ``eta1`` throughout with the constant
schedule. Runs are deterministic functions of their config: gradients and
noise are drawn from counter-based generators keyed by the master seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covariance import (
    PROBE_STREAM,
    CovarianceFactor,
    LDP,
    Pairwise,
    counter_generator,
    factorize,
    materialize,
    sample_noise,
)
from .optimizer import CovDesignProblem, solve_cov, solve_ldp

ALGORITHMS = ("dsgd", "ldp", "decor", "corn")
MAX_RECORDS = 500
CSV_HEADER = "iteration,metric_name,value,seed,algorithm,epsilon,p,config_hash"


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"non-finite agent state at iteration {iteration}: {detail}")
        self.iteration = iteration


def clip(g: np.ndarray, C: float) -> np.ndarray:
    """Scale ``g`` into the Euclidean ball of radius ``C``."""
    if not C > 0:
        raise ValueError(f"clipping threshold must be > 0, got {C}")
    g = np.asarray(g, dtype=float)
    norm = float(np.linalg.norm(g))
    if norm <= C:
        return g.copy()
    return g * (C / norm)


def clip_rows(G: np.ndarray, C: float) -> np.ndarray:
    """``clip`` applied to every agent's gradient (row) separately."""
    if not C > 0:
        raise ValueError(f"clipping threshold must be > 0, got {C}")
    G = np.asarray(G, dtype=float)
    norms = np.linalg.norm(G, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > C, C / norms, 1.0)
    return G * scale[:, None]


def dsgd_step(states: np.ndarray, gradients: np.ndarray, W: np.ndarray, eta: float) -> np.ndarray:
    """``X <- W (X - eta G)``: local step then synchronous gossip."""
    X = np.asarray(states, dtype=float)
    G = np.asarray(gradients, dtype=float)
    if X.shape != G.shape or W.shape != (X.shape[0], X.shape[0]):
        raise ValueError(f"shape mismatch: states {X.shape}, gradients {G.shape}, W {W.shape}")
    return W @ (X - eta * G)


def step_size(eta1: float, t: int, schedule: str = "sqrt") -> float:
    if schedule == "sqrt":
        return eta1 / math.sqrt(t + 1)
    if schedule == "constant":
        return eta1
    raise ValueError(f"unknown step-size schedule {schedule!r}")


def record_schedule(T: int, every: int | None = None) -> list[int]:
    """Iterations at which metrics are recorded: 0, every, 2 every, ..., and T."""
    every = max(1, T // MAX_RECORDS) if every is None else every
    its = list(range(0, T + 1, every))
    if its[-1] != T:
        its.append(T)
    return its


@dataclass
class RunConfig:
    W: np.ndarray
    task: object
    T: int
    C: float
    eta1: float
    seed: int = 0
    factor: CovarianceFactor | None = None
    schedule: str = "sqrt"
    record_every: int | None = None
    x0: np.ndarray | None = None

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not self.C > 0:
            raise ValueError(f"C must be > 0, got {self.C}")
        if not self.eta1 > 0:
            raise ValueError(f"eta1 must be > 0, got {self.eta1}")
        n = self.W.shape[0]
        if self.task.n != n:
            raise ValueError(f"task has {self.task.n} agents but W has {n}")
        if self.factor is not None and self.factor.n != n:
            raise ValueError(f"noise factor has size {self.factor.n} but W has {n}")

    def initial_states(self) -> np.ndarray:
        if self.x0 is None:
            return np.zeros((self.W.shape[0], self.task.dim))
        x0 = np.asarray(self.x0, dtype=float)
        return np.broadcast_to(x0, (self.W.shape[0], self.task.dim)).copy()


@dataclass
class Trajectory:
    records: list = field(default_factory=list)  # (iteration, metric_name, value)
    final_states: np.ndarray | None = None
    schedule: list = field(default_factory=list)

    def series(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        pts = [(it, v) for it, m, v in self.records if m == name]
        its, vals = zip(*pts) if pts else ((), ())
        return np.array(its, dtype=int), np.array(vals, dtype=float)

    def final(self, name: str) -> float:
        _, vals = self.series(name)
        return float(vals[-1])

    def csv_lines(self, seed: int, algorithm: str, epsilon: float | str = "", p: float | str = "",
                  config_hash: str = "") -> list[str]:
        out = [CSV_HEADER]
        for it, name, value in self.records:
            out.append(f"{it},{name},{value!r},{seed},{algorithm},{epsilon},{p},{config_hash}")
        return out

    def write_csv(self, path: str | Path, **labels) -> None:
        Path(path).write_text("\n".join(self.csv_lines(**labels)) + "\n")


def _noise(factor: CovarianceFactor | None, seed: int, t: int, n: int, d: int) -> np.ndarray:
    if factor is None:
        return np.zeros((n, d))
    return sample_noise(factor, seed, t, dim=d).v


def _record(traj: Trajectory, it: int, task, X: np.ndarray, noise_sq: float) -> None:
    for name, value in task.metrics(X).items():
        traj.records.append((it, name, float(value)))
    traj.records.append((it, "noise_norm2", float(noise_sq)))


def corn_dsgd_run(cfg: RunConfig) -> Trajectory:
    """Run ``cfg.T`` noisy gossip iterations and record metrics on the schedule."""
    W = np.asarray(cfg.W, dtype=float)
    X = cfg.initial_states()
    n, d = X.shape
    schedule = record_schedule(cfg.T, cfg.record_every)
    marks = set(schedule)
    traj = Trajectory(schedule=schedule)
    _record(traj, 0, cfg.task, X, 0.0)
    for t in range(cfg.T):
        G = clip_rows(cfg.task.gradients(X, cfg.seed, t), cfg.C)
        V = _noise(cfg.factor, cfg.seed, t, n, d)
        X = dsgd_step(X, G + V, W, step_size(cfg.eta1, t, cfg.schedule))
        if not np.all(np.isfinite(X)):
            bad = np.argwhere(~np.isfinite(X))[0]
            raise DivergenceError(t + 1, f"agent {bad[0]}, coordinate {bad[1]}")
        if t + 1 in marks:
            _record(traj, t + 1, cfg.task, X, float(np.sum(V * V)))
    traj.final_states = X
    return traj


def states_at(cfg: RunConfig, t: int) -> np.ndarray:
    """Noisy iterate ``x~^(t)`` of the run described by ``cfg``."""
    W = np.asarray(cfg.W, dtype=float)
    X = cfg.initial_states()
    n, d = X.shape
    for s in range(t):
        G = clip_rows(cfg.task.gradients(X, cfg.seed, s), cfg.C)
        X = dsgd_step(X, G + _noise(cfg.factor, cfg.seed, s, n, d), W, step_size(cfg.eta1, s, cfg.schedule))
    return X


@dataclass(frozen=True)
class ProbeResult:
    noise_free_error: float
    noise_variance: float
    total: float
    predicted_noise: float

    @property
    def residual(self) -> float:
        """``|total - (noise_free + predicted)| / total``."""
        return abs(self.total - (self.noise_free_error + self.predicted_noise)) / max(self.total, 1e-300)


def variance_decomposition_probe(cfg: RunConfig, t_probe: int, redraws: int = 10_000,
                                 states: np.ndarray | None = None) -> ProbeResult:
    """Empirical split of ``E|x~^(t+1) - x~^(t)|^2`` at ``t = t_probe``.

    The iterate ``x~^(t)`` and the clipped gradients are held fixed (the
    run's own draws); only the privacy noise is redrawn ``redraws`` times
    from a probe stream. ``noise_free_error`` is the virtual noise-free step
    ``|x^(t+1) - x~^(t)|^2``, ``noise_variance`` the sample mean of
    ``eta^2 |W v|^2`` and ``predicted_noise`` its exact value
    ``eta^2 d Tr(W R W^T)``.
    """
    if cfg.factor is None:
        raise ValueError("the probe needs a noise factor (use a zero matrix for the noise-free case)")
    W = np.asarray(cfg.W, dtype=float)
    X = states_at(cfg, t_probe) if states is None else np.asarray(states, dtype=float)
    n, d = X.shape
    eta = step_size(cfg.eta1, t_probe, cfg.schedule)
    G = clip_rows(cfg.task.gradients(X, cfg.seed, t_probe), cfg.C)
    X_hat = dsgd_step(X, G, W, eta)
    base = X_hat - X
    noise_free = float(np.sum(base * base))
    F = cfg.factor.F
    WF = W @ F
    rng = counter_generator(cfg.seed, t_probe, PROBE_STREAM)
    total = noise_sq = 0.0
    chunk = 10_000
    done = 0
    while done < redraws:
        k = min(chunk, redraws - done)
        S = rng.standard_normal((k, d, n))
        # step difference for each redraw: base - eta * W F s, per coordinate
        D = -eta * np.einsum("ij,kdj->kid", WF, S)
        noise_sq += float(np.sum(D * D))
        total += float(np.sum((base[None] + D) ** 2))
        done += k
    R = F @ F.T
    predicted = eta**2 * d * float(np.einsum("ij,jk,ik->", W, R, W))
    return ProbeResult(noise_free, noise_sq / redraws, total / redraws, predicted)


# ------------------------------------------------------------ noise designs


@dataclass
class NoiseDesign:
    algorithm: str
    R: np.ndarray | None
    factor: CovarianceFactor | None
    summary: dict


def design_noise(algorithm: str, W: np.ndarray, L: np.ndarray, kappa: float, cap="auto") -> NoiseDesign:
    """Covariance used by each algorithm at privacy level ``kappa``.

    ``dsgd`` is noise-free, ``ldp`` uses ``(1/kappa) I``, ``decor`` the best
    ``sigma_pair2 I + sigma_cor2 L`` and ``corn`` the best general matrix.
    """
    n = W.shape[0]
    if algorithm == "dsgd":
        return NoiseDesign("dsgd", None, None, {"structure": "none", "objective": 0.0})
    if algorithm == "ldp":
        sigma2 = solve_ldp(kappa)
        R = materialize(LDP(sigma2, n))
        return NoiseDesign("ldp", R, factorize(R), {"structure": "ldp", "sigma2": sigma2,
                                                    "objective": float(np.trace(W @ R @ W.T))})
    if algorithm == "decor":
        sol = solve_cov(CovDesignProblem(W, kappa, cap, "pairwise", L))
        R = materialize(Pairwise(sol.details["sigma_pair2"], sol.details["sigma_cor2"], L))
        return NoiseDesign("decor", R, factorize(R), _plain(sol.summary()))
    if algorithm == "corn":
        sol = solve_cov(CovDesignProblem(W, kappa, cap, "general"))
        return NoiseDesign("corn", sol.R_star, factorize(sol.R_star), _plain(sol.summary()))
    raise ValueError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")


def _plain(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, np.generic):
            v = v.item()
        if isinstance(v, (int, float, str, bool)) or v is None:
            out[k] = v
    return out

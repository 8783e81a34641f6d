"""Noise covariance structures, their factors, and shared-seed noise draws.

Every agent that knows the factor ``F`` and the shared seed can rebuild the
network-wide noise vector ``v = F s`` for iteration ``t`` on its own: the
standard-normal vector ``s`` comes from a Philox counter-based generator
keyed by the seed, with the iteration index in the counter.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SYM_TOL = 1e-12
CLAMP_TOL = 1e-9

# Key tags separate independent stream families drawn from one master seed.
NOISE_STREAM = 1
GRADIENT_STREAM = 2
PROBE_STREAM = 3
_MASK64 = (1 << 64) - 1


class NotPositiveDefiniteError(ValueError):
    pass


def counter_generator(seed: int, t: int, stream: int = NOISE_STREAM, lane: int = 0) -> np.random.Generator:
    """Generator for draw ``lane`` of iteration ``t`` under ``seed``.

    Philox is counter-based, so ``(seed, stream)`` selects the key and
    ``(t, lane)`` selects the counter block; no state is carried between
    iterations and any iteration can be replayed in isolation.
    """
    key = (int(stream) << 64) | (int(seed) & _MASK64)
    bitgen = np.random.Philox(key=key, counter=[0, 0, int(t) & _MASK64, int(lane) & _MASK64])
    return np.random.Generator(bitgen)


@dataclass(frozen=True)
class LDP:
    sigma2: float
    n: int

    def matrix(self) -> np.ndarray:
        _positive("sigma2", self.sigma2)
        return self.sigma2 * np.eye(self.n)


@dataclass(frozen=True)
class Pairwise:
    """``sigma_pair2 * I + sigma_cor2 * L`` (edge-wise cancelling noise)."""

    sigma_pair2: float
    sigma_cor2: float
    L: np.ndarray

    def matrix(self) -> np.ndarray:
        _positive("sigma_pair2", self.sigma_pair2)
        if self.sigma_cor2 < 0:
            raise ValueError(f"sigma_cor2 must be >= 0, got {self.sigma_cor2}")
        L = np.asarray(self.L, dtype=float)
        return self.sigma_pair2 * np.eye(L.shape[0]) + self.sigma_cor2 * L


@dataclass(frozen=True)
class Mixed:
    """``sigma_mix2 * I + R_cor`` with a PSD correlated part."""

    sigma_mix2: float
    R_cor: np.ndarray

    def matrix(self) -> np.ndarray:
        _positive("sigma_mix2", self.sigma_mix2)
        R_cor = np.asarray(self.R_cor, dtype=float)
        if R_cor.ndim == 0:
            raise ValueError("R_cor must be a square matrix")
        _check_symmetric(R_cor)
        min_eig = np.linalg.eigvalsh(R_cor)[0]
        if min_eig < -CLAMP_TOL * max(np.trace(R_cor), 0.0) - 1e-300:
            raise NotPositiveDefiniteError(f"R_cor is not PSD (min eigenvalue {min_eig:.3g})")
        return self.sigma_mix2 * np.eye(R_cor.shape[0]) + R_cor


@dataclass(frozen=True)
class Explicit:
    R: np.ndarray

    def matrix(self) -> np.ndarray:
        return np.array(self.R, dtype=float)


CovarianceSpec = LDP | Pairwise | Mixed | Explicit


def materialize(spec: CovarianceSpec, require_pd: bool = True) -> np.ndarray:
    """Dense covariance matrix for ``spec``; positive definite unless told otherwise."""
    R = spec.matrix()
    _check_symmetric(R)
    if require_pd:
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(
                "covariance is not positive definite; no finite privacy guarantee exists"
            ) from None
    return R


@dataclass(frozen=True)
class CovarianceFactor:
    F: np.ndarray
    method: str

    @property
    def n(self) -> int:
        return self.F.shape[0]


def factorize(R: np.ndarray, method: str = "eigh") -> CovarianceFactor:
    """Return ``F`` with ``F @ F.T == R``.

    ``method="eigh"`` builds the symmetric square root and tolerates
    PSD-but-singular input; eigenvalues down to ``-1e-9 * trace(R)`` are
    treated as rounding noise and clamped. ``method="cholesky"`` needs a
    strictly PD matrix.
    """
    R = np.asarray(R, dtype=float)
    _check_symmetric(R)
    if method == "cholesky":
        try:
            return CovarianceFactor(np.linalg.cholesky(R), "cholesky")
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError("Cholesky factor needs a positive definite matrix") from None
    if method != "eigh":
        raise ValueError(f"unknown factorization {method!r}")
    R = 0.5 * (R + R.T)
    w, V = np.linalg.eigh(R)
    floor = -CLAMP_TOL * max(np.trace(R), 0.0)
    if w[0] < floor:
        raise NotPositiveDefiniteError(f"matrix is indefinite (min eigenvalue {w[0]:.3g})")
    root = np.sqrt(np.clip(w, 0.0, None))
    F = (V * root) @ V.T
    return CovarianceFactor(F, "eigh")


@dataclass(frozen=True)
class NoiseSample:
    v: np.ndarray
    iteration: int
    seed: int


def standard_normal_block(seed: int, t: int, n: int, dim: int = 1) -> np.ndarray:
    """The ``dim x n`` block of N(0, 1) draws used at iteration ``t``.

    Row ``k`` feeds coordinate ``k`` of the model; row 0 is the same draw
    whatever ``dim`` is.
    """
    return counter_generator(seed, t, NOISE_STREAM).standard_normal((dim, n))


def sample_noise(factor: CovarianceFactor | np.ndarray, seed: int, t: int, dim: int | None = None) -> NoiseSample:
    """Correlated noise for iteration ``t``.

    With ``dim=None`` the result is a length-``n`` vector; otherwise it is an
    ``n x dim`` array holding one independent correlated vector per coordinate.
    """
    F = factor.F if isinstance(factor, CovarianceFactor) else np.asarray(factor, dtype=float)
    n = F.shape[0]
    S = standard_normal_block(seed, t, n, 1 if dim is None else dim)
    V = F @ S.T
    return NoiseSample(V[:, 0] if dim is None else V, t, seed)


def effective_variance(W: np.ndarray, R: np.ndarray) -> float:
    """Post-mixing noise power ``Tr(W R W^T)``."""
    W = np.asarray(W, dtype=float)
    R = np.asarray(R, dtype=float)
    if W.shape[1] != R.shape[0] or R.shape[0] != R.shape[1]:
        raise ValueError(f"shape mismatch: W {W.shape}, R {R.shape}")
    return float(np.einsum("ij,jk,ik->", W, R, W))


def write_matrix_csv(M: np.ndarray, path: str | Path) -> None:
    rows = [",".join(repr(float(x)) for x in row) for row in np.atleast_2d(M)]
    Path(path).write_text("\n".join(rows) + "\n")


def read_matrix_csv(path: str | Path) -> np.ndarray:
    M = np.loadtxt(path, delimiter=",", ndmin=2)
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{path}: expected a square matrix, got shape {M.shape}")
    return M


def _positive(name: str, value: float) -> None:
    if not value > 0:
        raise ValueError(f"{name} must be > 0, got {value}")


def _check_symmetric(R: np.ndarray) -> None:
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"covariance must be square, got shape {R.shape}")
    scale = max(1.0, float(np.max(np.abs(R)))) if R.size else 1.0
    if np.max(np.abs(R - R.T), initial=0.0) > SYM_TOL * scale:
        raise ValueError("covariance matrix is not symmetric")

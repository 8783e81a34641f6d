"""Agent-level (epsilon, delta) accounting for correlated Gaussian noise.

A run with noise covariance ``R`` and clipping threshold ``C`` is
``(alpha, alpha * eps_step)``-RDP per step with
``eps_step = 2 C^2 max_i [R^-1]_ii``. Composing over ``T`` steps and
converting with the optimal order gives

    eps <= 2 C^2 T m + 2 C sqrt(2 T log(1/delta) m),   m = max_i [R^-1]_ii.

Requiring ``m <= kappa = eps^2 / (16 C^2 T log(1/delta))`` is enough for the
target budget. Logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

MAX_CONDITION = 1e12


class SingularCovarianceError(ValueError):
    pass


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float
    T: int
    C: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.T < 0:
            raise ValueError(f"T must be >= 0, got {self.T}")
        if not self.C > 0:
            raise ValueError(f"clipping threshold must be > 0, got {self.C}")


def kappa_from_budget(b: PrivacyBudget) -> float:
    """Largest admissible ``[R^-1]_ii`` for budget ``b``."""
    if b.T <= 0:
        raise ValueError("kappa is undefined for T = 0 (any noise level is private)")
    return b.epsilon**2 / (16.0 * b.C**2 * b.T * math.log(1.0 / b.delta))


def inverse_diagonal(R: np.ndarray) -> np.ndarray:
    """``diag(R^-1)`` through a Cholesky factorization.

    Raises ``SingularCovarianceError`` when ``R`` is not PD or its condition
    number exceeds 1e12.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"covariance must be square, got shape {R.shape}")
    try:
        cho = linalg.cho_factor(R, lower=True)
    except linalg.LinAlgError:
        raise SingularCovarianceError("covariance is singular: no finite privacy guarantee") from None
    eig = np.linalg.eigvalsh(R)
    if eig[0] <= 0 or eig[-1] / eig[0] > MAX_CONDITION:
        raise SingularCovarianceError(
            f"covariance is numerically singular (condition number {eig[-1] / max(eig[0], 1e-300):.3g}): "
            "no finite privacy guarantee"
        )
    Rinv = linalg.cho_solve(cho, np.eye(R.shape[0]))
    return np.diag(Rinv).copy()


def per_step_rdp(R: np.ndarray, C: float) -> float:
    """RDP slope ``eps_step`` of one noisy gossip step."""
    return 2.0 * C**2 * float(inverse_diagonal(R).max())


def epsilon_bound(R: np.ndarray, b: PrivacyBudget) -> float:
    m = float(inverse_diagonal(R).max())
    return _bound_from_m(m, b)


def _bound_from_m(m: float, b: PrivacyBudget) -> float:
    return 2.0 * b.C**2 * b.T * m + 2.0 * b.C * math.sqrt(2.0 * b.T * math.log(1.0 / b.delta) * m)


@dataclass
class BudgetReport:
    passed: bool
    kappa: float
    epsilon_bound: float
    inverse_diagonal: np.ndarray
    slack: np.ndarray = field(repr=False)

    @property
    def max_violation(self) -> float:
        return float(max(0.0, -self.slack.min()))

    def lines(self) -> list[str]:
        out = [
            f"kappa            {self.kappa:.10g}",
            f"epsilon bound    {self.epsilon_bound:.10g}",
            f"max [R^-1]_ii    {self.inverse_diagonal.max():.10g}",
        ]
        for i, (d, s) in enumerate(zip(self.inverse_diagonal, self.slack)):
            out.append(f"agent {i:4d}  [R^-1]_ii={d:.10g}  slack={s:.10g}")
        out.append("PASS" if self.passed else f"FAIL (max violation {self.max_violation:.10g})")
        return out


def verify_budget(R: np.ndarray, b: PrivacyBudget, rtol: float = 1e-12) -> BudgetReport:
    """Check ``max_i [R^-1]_ii <= kappa(b)`` and report the implied epsilon.

    ``rtol`` absorbs rounding in the inverse at the exact boundary.
    """
    kappa = kappa_from_budget(b)
    d = inverse_diagonal(R)
    slack = kappa - d
    passed = bool(np.all(slack >= -rtol * kappa))
    return BudgetReport(passed, kappa, _bound_from_m(float(d.max()), b), d, slack)

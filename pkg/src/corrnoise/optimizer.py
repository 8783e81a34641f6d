"""Covariance design: minimize post-mixing noise power under a privacy constraint.

All problem variants share one shape. The covariance (or each covariance
visible to some coalition) is an affine function ``R(theta)`` of a parameter
vector, and the solver minimizes ``Tr(W R W^T)`` subject to

* ``[R_v(theta)^-1]_ii <= kappa`` for every view ``v`` and protected agent ``i``,
* linear-matrix inequalities ``S_j(theta) >= 0`` (strict PD floors, PSD blocks),
* linear inequalities ``G theta <= h`` (variance floor, diagonal cap).

A log-barrier interior-point method with damped Newton centering handles
every variant. Hessians are assembled in closed form in the basis of
symmetric matrices ``E_ab = e_a e_b^T + e_b e_a^T`` (``a < b``) and
``E_aa = e_a e_a^T``, using ``d[R^-1]_ii = -(R^-1 e_i)(R^-1 e_i)^T``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .graph import laplacian, Graph

DEFAULT_CAP_FACTOR = 100.0
FLOOR_FACTOR = 1e-6
MU_DECAY = 0.2
GAP_TOL = 1e-10
FALLBACK_GAP = 1e-9
NEWTON_TOL = 1e-10
MAX_OUTER = 60
MAX_NEWTON = 100
SAFETY_MARGIN = 1e-9
ACTIVE_TOL = 1e-6
COALITION_LIMIT = 100_000


class InfeasibleProblemError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------- problems


@dataclass
class CovDesignProblem:
    """Covariance design instance.

    ``cap`` bounds every diagonal entry of ``R``; ``"auto"`` means
    ``100 / kappa``. Without a cap the optimum is not attained whenever
    ``W`` is rank deficient (noise escapes into the null space of ``W``).
    """

    W: np.ndarray
    kappa: float
    cap: float | None | str = "auto"
    structure: str = "general"
    L: np.ndarray | None = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if not self.kappa > 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")
        if self.structure not in ("general", "pairwise", "scalar"):
            raise ValueError(f"unknown structure {self.structure!r}")
        if isinstance(self.cap, str):
            if self.cap != "auto":
                raise ValueError(f"cap must be a number, None or 'auto', got {self.cap!r}")
            self.cap = DEFAULT_CAP_FACTOR / self.kappa
        if self.cap is not None and not self.cap > 1.0 / self.kappa:
            raise InfeasibleProblemError(
                f"cap {self.cap:.6g} must exceed 1/kappa = {1.0 / self.kappa:.6g}: "
                "[R]_ii >= 1/[R^-1]_ii >= 1/kappa on any feasible point"
            )
        if self.structure == "pairwise" and self.L is None:
            raise ValueError("pairwise structure needs the graph Laplacian L")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def floor(self) -> float:
        return FLOOR_FACTOR / self.kappa


@dataclass(frozen=True)
class HbcThreatModel:
    """Seed groups and coalition size for honest-but-curious agents.

    Seed ``k`` (and the correlated block it drives) is known to the agents in
    ``groups[k]``; coalitions of up to ``q`` agents pool what they know.
    """

    groups: tuple
    q: int

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(sorted(set(int(a) for a in g))) for g in self.groups))
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("seed groups must be non-empty")
        if self.q < 0:
            raise ValueError(f"coalition size q must be >= 0, got {self.q}")

    @property
    def m(self) -> int:
        return len(self.groups)


@dataclass
class CovSolution:
    R_star: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    structure: str
    cap: float | None
    cap_active: bool
    params: np.ndarray = field(repr=False)
    details: dict = field(default_factory=dict)
    blocks: list | None = field(default=None, repr=False)
    program: "_Program | None" = field(default=None, repr=False)

    def summary(self) -> dict:
        out = {
            "structure": self.structure,
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "cap": self.cap,
            "cap_active": self.cap_active,
        }
        out.update(self.details)
        return out


# ------------------------------------------------------ symmetric-basis algebra


class _SymBasis:
    """Coordinates of symmetric ``n x n`` matrices on the upper triangle."""

    def __init__(self, n: int):
        self.n = n
        self.a, self.b = np.triu_indices(n)
        self.p = self.a.size
        self.weight = np.where(self.a == self.b, 0.5, 1.0)
        self.mult = np.where(self.a == self.b, 1.0, 2.0)
        self.index = np.zeros((n, n), dtype=int)
        self.index[self.a, self.b] = np.arange(self.p)
        self.index[self.b, self.a] = np.arange(self.p)
        self.diag = self.index[np.arange(n), np.arange(n)]

    def mat(self, y: np.ndarray) -> np.ndarray:
        X = np.empty((self.n, self.n))
        X[self.a, self.b] = y
        X[self.b, self.a] = y
        return X

    def vec(self, X: np.ndarray) -> np.ndarray:
        return X[self.a, self.b].copy()

    def coords(self, G: np.ndarray) -> np.ndarray:
        """Inner products ``<G, E_k>`` for a symmetric ``G``."""
        return self.mult * G[self.a, self.b]

    def qform(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """Matrix of the bilinear form ``(X, Y) -> tr(A X B Y)`` on the basis."""
        a = self.a[:, None]
        b = self.b[:, None]
        c = self.a[None, :]
        d = self.b[None, :]
        Q = A[d, a] * B[b, c] + A[c, a] * B[b, d] + A[d, b] * B[a, c] + A[c, b] * B[a, d]
        return Q * np.outer(self.weight, self.weight)


@dataclass
class _View:
    P: np.ndarray | None  # parameters -> full-basis coordinates; None is identity
    agents: np.ndarray


@dataclass
class _Lmi:
    basis: _SymBasis
    P: np.ndarray | None
    offset: np.ndarray


@dataclass
class _Program:
    basis: _SymBasis
    c: np.ndarray
    kappa: float
    views: list
    lmis: list
    G: np.ndarray
    h: np.ndarray
    mix: np.ndarray | None  # parameters -> coordinates of the full covariance
    cap: float | None

    @property
    def nu(self) -> int:
        return sum(v.agents.size for v in self.views) + sum(l.basis.n for l in self.lmis) + self.h.size

    def covariance(self, theta: np.ndarray) -> np.ndarray:
        y = theta if self.mix is None else self.mix @ theta
        return self.basis.mat(y)


def _pull(P, vec):
    return vec if P is None else P.T @ vec


def _pull2(P, H):
    return H if P is None else P.T @ H @ P


def _push(P, theta):
    return theta if P is None else P @ theta


def _view_terms(prog: _Program, view: _View, theta: np.ndarray):
    R = prog.basis.mat(_push(view.P, theta))
    cho = linalg.cho_factor(R, lower=True)
    Rinv = linalg.cho_solve(cho, np.eye(R.shape[0]))
    Rinv = 0.5 * (Rinv + Rinv.T)
    return R, Rinv


def _evaluate(prog: _Program, theta: np.ndarray, order: int):
    """Barrier value (and gradient, Hessian if ``order``); ``None`` off-domain."""
    basis = prog.basis
    p = theta.size
    val = 0.0
    grad = np.zeros(p) if order else None
    hess = np.zeros((p, p)) if order else None
    for view in prog.views:
        try:
            _, Rinv = _view_terms(prog, view, theta)
        except linalg.LinAlgError:
            return None
        slack = prog.kappa - np.diag(Rinv)[view.agents]
        if np.any(slack <= 0):
            return None
        val -= np.sum(np.log(slack))
        if order:
            w = 1.0 / slack
            U = Rinv[view.agents]
            Gm = -(U[:, basis.a] * U[:, basis.b]) * basis.mult
            Gw = (U.T * w) @ U
            H = basis.qform(Gw, Rinv) + basis.qform(Rinv, Gw) + (Gm.T * w**2) @ Gm
            grad += _pull(view.P, Gm.T @ w)
            hess += _pull2(view.P, H)
    for lmi in prog.lmis:
        S = lmi.basis.mat(_push(lmi.P, theta)) + lmi.offset
        try:
            cho = linalg.cho_factor(S, lower=True)
        except linalg.LinAlgError:
            return None
        val -= 2.0 * np.sum(np.log(np.diag(cho[0])))
        if order:
            Sinv = linalg.cho_solve(cho, np.eye(S.shape[0]))
            Sinv = 0.5 * (Sinv + Sinv.T)
            grad -= _pull(lmi.P, lmi.basis.coords(Sinv))
            hess += _pull2(lmi.P, lmi.basis.qform(Sinv, Sinv))
    if prog.h.size:
        s = prog.h - prog.G @ theta
        if np.any(s <= 0):
            return None
        val -= np.sum(np.log(s))
        if order:
            grad += prog.G.T @ (1.0 / s)
            hess += (prog.G.T * s**-2) @ prog.G
    if not order:
        return val
    return val, grad, 0.5 * (hess + hess.T)


def _newton_direction(H, g):
    try:
        return linalg.cho_solve(linalg.cho_factor(H), -g)
    except linalg.LinAlgError:
        jitter = 1e-12 * max(1.0, np.max(np.abs(np.diag(H))))
        return np.linalg.lstsq(H + jitter * np.eye(H.shape[0]), -g, rcond=None)[0]


def _barrier_solve(prog: _Program, theta0: np.ndarray, gap_tol: float = GAP_TOL,
                   newton_tol: float = NEWTON_TOL, max_outer: int = MAX_OUTER):
    theta = np.array(theta0, dtype=float)
    if _evaluate(prog, theta, 0) is None:
        raise SolverError("initial point is not strictly feasible")
    f0 = abs(float(prog.c @ theta))
    scale = max(f0, 1e-300)
    nu = prog.nu
    t = nu / scale
    newton_steps = 0
    last = None
    for outer in range(1, max_outer + 1):
        centered = theta
        decrement = math.inf
        for _ in range(MAX_NEWTON):
            val, g, H = _evaluate(prog, theta, 2)
            gt = t * prog.c + g
            dx = _newton_direction(H, gt)
            previous, decrement = decrement, float(-gt @ dx)
            if decrement / 2.0 <= newton_tol:
                break
            # t*c and the barrier gradient cancel; the decrement bottoms out at rounding level
            if decrement < 1e-3 and decrement > 0.5 * previous:
                break
            phi0 = t * float(prog.c @ theta) + val
            step = 1.0
            accepted = False
            while step > 1e-16:
                trial = theta + step * dx
                v = _evaluate(prog, trial, 0)
                if v is not None:
                    phi = t * float(prog.c @ trial) + v
                    # below ~1e-4 the decrease is lost in rounding of phi
                    if phi <= phi0 - 0.25 * step * decrement or decrement < 1e-4:
                        accepted = True
                        break
                step *= 0.5
            newton_steps += 1
            if not accepted:
                break
            theta = trial
        else:
            decrement = math.inf
        if decrement / 2.0 > 1e-3:
            # past the rounding floor a tight gap_tol cannot be met; keep the
            # last well-centered point if it is already accurate enough
            if last is not None and nu * last[1] <= FALLBACK_GAP * scale:
                return centered, last[1], newton_steps, outer - 1
            raise SolverError(
                f"Newton centering failed at barrier weight 1/t={1.0 / t:.3g} (decrement {decrement:.3g})"
            )
        if nu / t <= gap_tol * scale:
            return theta, 1.0 / t, newton_steps, outer
        last = (theta, 1.0 / t)
        t /= MU_DECAY
    raise SolverError(f"barrier method hit {max_outer} outer iterations (gap {nu / t:.3g})")


# ------------------------------------------------------------ formulations


def _start_level(kappa: float, cap: float | None) -> float:
    r0 = 2.0 / kappa
    if cap is not None:
        r0 = min(r0, 0.5 * (1.0 / kappa + cap))
    return r0


def _inner_cap(cap: float) -> float:
    # room for the final scaling in _project, which may grow R by the margin
    return cap * (1.0 - 4.0 * SAFETY_MARGIN)


def _program_general(prob: CovDesignProblem):
    n = prob.n
    basis = _SymBasis(n)
    c = basis.coords(prob.W.T @ prob.W)
    lmis = [_Lmi(basis, None, -prob.floor * np.eye(n))]
    if prob.cap is not None:
        G = np.zeros((n, basis.p))
        G[np.arange(n), basis.diag] = 1.0
        h = np.full(n, _inner_cap(prob.cap))
    else:
        G, h = np.zeros((0, basis.p)), np.zeros(0)
    prog = _Program(basis, c, prob.kappa, [_View(None, np.arange(n))], lmis, G, h, None, prob.cap)
    theta0 = basis.vec(_start_level(prob.kappa, prob.cap) * np.eye(n))
    return prog, theta0


def _program_family(prob: CovDesignProblem, mats: list, lower: list):
    """Program for ``R = sum_k theta_k mats[k]`` with ``theta_k >= lower[k]``."""
    n = prob.n
    basis = _SymBasis(n)
    P = np.column_stack([basis.vec(A) for A in mats])
    c = P.T @ basis.coords(prob.W.T @ prob.W)
    k = len(mats)
    G = -np.eye(k)
    h = -np.asarray(lower, dtype=float)
    if prob.cap is not None:
        G = np.vstack([G, P[basis.diag]])
        h = np.concatenate([h, np.full(n, _inner_cap(prob.cap))])
    return _Program(basis, c, prob.kappa, [_View(P, np.arange(n))], [], G, h, P, prob.cap)


def _program_pairwise(prob: CovDesignProblem):
    L = np.asarray(prob.L, dtype=float)
    prog = _program_family(prob, [np.eye(prob.n), L], [prob.floor, 0.0])
    r0 = _start_level(prob.kappa, prob.cap)
    c0 = 0.5 / prob.kappa
    if prob.cap is not None:
        c0 = min(c0, 0.25 * (prob.cap - r0) / max(np.max(np.diag(L)), 1.0))
    return prog, np.array([r0, c0])


def _program_scalar(prob: CovDesignProblem):
    return _program_family(prob, [np.eye(prob.n)], [prob.floor]), np.array([_start_level(prob.kappa, prob.cap)])


def _program_hbc(W, kappa, threat: HbcThreatModel, cap, floor, limit):
    n = W.shape[0]
    if threat.q > n - 1:
        raise ValueError(f"coalition size q={threat.q} must be at most n-1={n - 1}")
    for g in threat.groups:
        if g[0] < 0 or g[-1] >= n:
            raise ValueError(f"seed group {g} out of range for n={n}")
    count = sum(math.comb(n, j) for j in range(threat.q + 1))
    if count > limit:
        raise ValueError(
            f"{count} coalitions of size <= {threat.q} exceed the limit {limit}; use a smaller q"
        )
    basis = _SymBasis(n)
    blocks = [_SymBasis(len(g)) for g in threat.groups]
    offsets = np.cumsum([1] + [b.p for b in blocks])
    ptot = int(offsets[-1])
    cols_sigma = np.zeros(basis.p)
    cols_sigma[basis.diag] = 1.0
    block_P = []
    for g, bb, off in zip(threat.groups, blocks, offsets[:-1]):
        ga = np.asarray(g)
        Pk = np.zeros((basis.p, ptot))
        Pk[basis.index[ga[bb.a], ga[bb.b]], off + np.arange(bb.p)] = 1.0
        block_P.append(Pk)

    def view_map(unknown):
        P = np.zeros((basis.p, ptot))
        P[:, 0] = cols_sigma
        for k in unknown:
            P += block_P[k]
        return P

    P_mix = view_map(range(threat.m))
    constrained: dict[frozenset, set] = {}
    members = [set(g) for g in threat.groups]
    for size in range(threat.q + 1):
        for coalition in itertools.combinations(range(n), size):
            I = set(coalition)
            unknown = frozenset(k for k in range(threat.m) if not (members[k] & I))
            constrained.setdefault(unknown, set()).update(set(range(n)) - I)
    views = [
        _View(view_map(sorted(u)), np.array(sorted(agents)))
        for u, agents in sorted(constrained.items(), key=lambda kv: sorted(kv[0]))
    ]
    lmis = []
    for bb, off in zip(blocks, offsets[:-1]):
        sel = np.zeros((bb.p, ptot))
        sel[np.arange(bb.p), off + np.arange(bb.p)] = 1.0
        lmis.append(_Lmi(bb, sel, np.zeros((bb.n, bb.n))))
    G = np.zeros((1, ptot))
    G[0, 0] = -1.0
    h = np.array([-floor])
    if cap is not None:
        G = np.vstack([G, P_mix[basis.diag]])
        h = np.concatenate([h, np.full(n, _inner_cap(cap))])
    prog = _Program(basis, basis.coords(W.T @ W) @ P_mix, kappa, views, lmis, G, h, P_mix, cap)

    r0 = _start_level(kappa, cap)
    multiplicity = np.zeros(n)
    for g in threat.groups:
        multiplicity[list(g)] += 1
    beta = 0.5 / kappa
    if cap is not None:
        beta = min(beta, 0.25 * (cap - r0) / multiplicity.max())
    theta0 = np.zeros(ptot)
    theta0[0] = r0
    for bb, off in zip(blocks, offsets[:-1]):
        theta0[off:off + bb.p] = bb.vec(beta * np.eye(bb.n))
    return prog, theta0, blocks, offsets


# ------------------------------------------------------------ post-processing


def _max_inverse_diagonal(prog: _Program, theta: np.ndarray) -> float:
    worst = -math.inf
    for view in prog.views:
        _, Rinv = _view_terms(prog, view, theta)
        worst = max(worst, float(np.max(np.diag(Rinv)[view.agents])))
    return worst


def _project(prog: _Program, theta: np.ndarray) -> np.ndarray:
    """Scale ``theta`` up until every inverse diagonal clears ``kappa`` by the margin."""
    target = prog.kappa * (1.0 - SAFETY_MARGIN)
    for _ in range(5):
        worst = _max_inverse_diagonal(prog, theta)
        if worst <= target:
            break
        theta = theta * (worst / target) * (1.0 + 1e-15)
    return theta


def _finish(prog, theta, mu, steps, structure, details=None) -> CovSolution:
    theta = _project(prog, theta)
    R = prog.covariance(theta)
    objective = float(prog.c @ theta)
    cap_active = bool(prog.cap is not None and np.max(np.diag(R)) >= prog.cap * (1.0 - 1e-6))
    sol = CovSolution(
        R_star=R,
        objective=objective,
        kkt_residual=math.nan,
        iterations=steps,
        structure=structure,
        cap=prog.cap,
        cap_active=cap_active,
        params=theta,
        details=dict(details or {}),
        program=prog,
    )
    if mu is not None:
        sol.details["barrier_gap"] = prog.nu * mu
    sol.kkt_residual = _kkt(prog, theta).max_residual
    return sol


# ------------------------------------------------------------ public solvers


def solve_ldp(kappa: float) -> float:
    """Smallest isotropic variance meeting the constraint: ``1 / kappa``."""
    if not kappa > 0:
        raise ValueError(f"kappa must be > 0, got {kappa}")
    return 1.0 / kappa


def solve_cov(problem: CovDesignProblem, gap_tol: float = GAP_TOL) -> CovSolution:
    """Optimal covariance within ``problem.structure``."""
    if problem.structure == "scalar":
        prog, _ = _program_scalar(problem)
        sigma2 = solve_ldp(problem.kappa)
        return _finish(prog, np.array([sigma2]), None, 0, "scalar", {"sigma_ldp2": sigma2})
    if problem.structure == "pairwise":
        L = np.asarray(problem.L, dtype=float)
        if not np.any(L):
            sol = solve_cov(CovDesignProblem(problem.W, problem.kappa, problem.cap, "scalar"))
            sol.structure = "pairwise"
            sol.details = {"sigma_pair2": sol.params[0], "sigma_cor2": 0.0}
            return sol
        prog, theta0 = _program_pairwise(problem)
        theta, mu, steps, _ = _barrier_solve(prog, theta0, gap_tol)
        sol = _finish(prog, theta, mu, steps, "pairwise")
        sol.details.update(sigma_pair2=float(sol.params[0]), sigma_cor2=float(sol.params[1]))
        return sol
    prog, theta0 = _program_general(problem)
    theta, mu, steps, _ = _barrier_solve(prog, theta0, gap_tol)
    sol = _finish(prog, theta, mu, steps, "general")
    sol.details["sigma_mix2_max"] = float(np.linalg.eigvalsh(sol.R_star)[0])
    return sol


def solve_decor(W: np.ndarray, L: np.ndarray, kappa: float, cap: float | None | str = "auto") -> tuple[float, float]:
    """``(sigma_pair2, sigma_cor2)`` of the best ``sigma_pair2 I + sigma_cor2 L``."""
    sol = solve_cov(CovDesignProblem(W, kappa, cap, "pairwise", L))
    return sol.details["sigma_pair2"], sol.details["sigma_cor2"]


def solve_cov_hbc(W: np.ndarray, kappa: float, threat: HbcThreatModel, cap: float | None | str = "auto",
                  coalition_limit: int = COALITION_LIMIT, gap_tol: float = GAP_TOL) -> CovSolution:
    """Optimal ``sigma_mix2 I + sum_k R_cor^(k)`` against coalitions of size <= q.

    Every coalition ``I`` with ``|I| <= q`` sees only the blocks whose seed
    group it does not touch, and each agent outside ``I`` must stay private
    under the covariance of those unknown blocks.
    """
    base = CovDesignProblem(W, kappa, cap)
    prog, theta0, blocks, offsets = _program_hbc(base.W, kappa, threat, base.cap, base.floor, coalition_limit)
    theta, mu, steps, _ = _barrier_solve(prog, theta0, gap_tol)
    sol = _finish(prog, theta, mu, steps, "hbc")
    block_mats = [bb.mat(sol.params[off:off + bb.p]) for bb, off in zip(blocks, offsets[:-1])]
    sol.details.update(sigma_mix2=float(sol.params[0]), q=threat.q, m=threat.m, views=len(prog.views))
    sol.blocks = block_mats
    return sol


def design_program(problem: CovDesignProblem) -> _Program:
    if problem.structure == "general":
        return _program_general(problem)[0]
    if problem.structure == "pairwise":
        return _program_pairwise(problem)[0]
    return _program_scalar(problem)[0]


def candidate(R: np.ndarray, problem: CovDesignProblem) -> CovSolution:
    """Wrap an arbitrary matrix as a solution of ``problem`` (for KKT checks)."""
    R = np.asarray(R, dtype=float)
    prog = design_program(problem)
    if problem.structure == "general":
        theta = prog.basis.vec(R)
    else:
        theta = np.linalg.lstsq(prog.mix, prog.basis.vec(R), rcond=None)[0]
    return CovSolution(
        R_star=R,
        objective=float(prog.c @ theta),
        kkt_residual=math.nan,
        iterations=0,
        structure=problem.structure,
        cap=prog.cap,
        cap_active=bool(prog.cap is not None and np.max(np.diag(R)) >= prog.cap * (1.0 - 1e-6)),
        params=theta,
        program=prog,
    )


# ------------------------------------------------------------ KKT reporting


@dataclass
class KKTReport:
    inverse_diagonal_excess: float  # max_i [R^-1]_ii - kappa (signed)
    primal_violation: float         # max(0, excess), inverse-variance units
    min_eigenvalue: float
    cap_slack: float | None
    stationarity: float
    dual_violation: float
    complementarity: float
    kappa: float
    active_constraints: int = 0

    @property
    def max_residual(self) -> float:
        return max(self.stationarity, self.dual_violation, self.complementarity, self.primal_violation / self.kappa)

    def as_dict(self) -> dict:
        return {
            "inverse_diagonal_excess": self.inverse_diagonal_excess,
            "primal_violation": self.primal_violation,
            "min_eigenvalue": self.min_eigenvalue,
            "cap_slack": self.cap_slack,
            "stationarity": self.stationarity,
            "dual_violation": self.dual_violation,
            "complementarity": self.complementarity,
            "max_residual": self.max_residual,
            "active_constraints": self.active_constraints,
        }


def kkt_report(sol: CovSolution, problem: CovDesignProblem | None = None) -> KKTReport:
    """Primal/dual feasibility and complementary slackness of ``sol``.

    Multipliers are recovered by non-negative least squares on the
    stationarity condition over the near-active constraints (inverse
    diagonals, linear bounds, and near-null eigendirections of the PSD
    constraints), so solver output and hand-built candidates are checked the
    same way.
    """
    prog = sol.program
    if prog is None:
        if problem is None:
            raise ValueError("kkt_report needs the problem for a solution without a program")
        prog = design_program(problem)
    return _kkt(prog, np.asarray(sol.params, dtype=float))


def _kkt(prog: _Program, theta: np.ndarray, active_tol: float = ACTIVE_TOL) -> KKTReport:
    basis = prog.basis
    R = prog.covariance(theta)
    objective = float(prog.c @ theta)
    fscale = max(abs(objective), 1e-300)
    cscale = max(float(np.max(np.abs(prog.c))), 1e-300)
    kappa = prog.kappa

    # (gradient column in the Lagrangian, slack) for every near-active constraint
    columns, slacks = [], []
    excess = -math.inf
    for view in prog.views:
        Rv = basis.mat(_push(view.P, theta))
        try:
            Rinv = np.linalg.inv(Rv)
        except np.linalg.LinAlgError:
            excess = math.inf
            continue
        d = np.diag(Rinv)[view.agents]
        excess = max(excess, float(np.max(d - kappa)))
        for row, slack in zip(Rinv[view.agents], kappa - d):
            if slack <= active_tol * kappa:
                grad = -np.outer(row, row)
                columns.append(_pull(view.P, basis.coords(grad)))
                slacks.append(slack)
    if prog.h.size:
        lin_slack = prog.h - prog.G @ theta
        lin_scale = np.maximum(np.maximum(np.abs(prog.h), np.abs(prog.G) @ np.abs(theta)), 1.0 / kappa)
        for row, slack, sc in zip(prog.G, lin_slack, lin_scale):
            if slack <= active_tol * sc:
                columns.append(row)
                slacks.append(slack)
    # PSD constraints: multiplier V Y V^T on the near-null space V, Y PSD
    free_blocks = []
    n_bounded = len(columns)
    for lmi in prog.lmis:
        S = lmi.basis.mat(_push(lmi.P, theta)) + lmi.offset
        w, V = np.linalg.eigh(S)
        top = max(float(np.max(np.abs(w))), 1.0 / kappa)
        null = V[:, w <= active_tol * top]
        k = null.shape[1]
        if k == 0:
            continue
        start = len(columns)
        for E in _orthonormal_sym(k):
            columns.append(-_pull(lmi.P, lmi.basis.coords(null @ E @ null.T)))
        free_blocks.append((k, start, null, S))

    if columns:
        A = np.column_stack(columns)
        lower = np.r_[np.zeros(n_bounded), np.full(len(columns) - n_bounded, -np.inf)]
        res = optimize.lsq_linear(A, -prog.c, bounds=(lower, np.inf), method="bvls", tol=1e-14)
        mult = res.x
        r, dual, complementarity = _dual_terms(prog.c, A, mult, slacks, free_blocks, fscale)
        if free_blocks and dual > NEWTON_TOL:
            blocks = [(k, start) for k, start, _, _ in free_blocks]
            alt = _refine_psd(A, prog.c, mult, n_bounded, blocks)
            r2, dual2, comp2 = _dual_terms(prog.c, A, alt, slacks, free_blocks, fscale)
            if max(np.max(np.abs(r2)) / cscale, dual2) < max(np.max(np.abs(r)) / cscale, dual):
                r, dual, complementarity = r2, dual2, comp2
    else:
        r = prog.c
        complementarity = dual = 0.0
    cap_slack = float(prog.cap - np.max(np.diag(R))) if prog.cap is not None else None
    return KKTReport(
        inverse_diagonal_excess=excess,
        primal_violation=max(0.0, excess),
        min_eigenvalue=float(np.linalg.eigvalsh(R)[0]),
        cap_slack=cap_slack,
        stationarity=float(np.max(np.abs(r))) / cscale,
        dual_violation=dual,
        complementarity=complementarity,
        kappa=kappa,
        active_constraints=len(columns),
    )


def _dual_terms(c, A, mult, slacks, free_blocks, fscale):
    n_bounded = len(slacks)
    r = c + A @ mult
    comp = list(np.abs(mult[:n_bounded] * np.asarray(slacks)))
    dual = max(0.0, -float(np.min(mult[:n_bounded], initial=0.0)))
    for k, start, null, S in free_blocks:
        Y = _sym_from_orthonormal(k, mult[start:start + k * (k + 1) // 2])
        Z = null @ Y @ null.T
        comp.append(abs(float(np.sum(Z * S))))
        dual = max(dual, -float(np.linalg.eigvalsh(Y)[0]))
    dual /= max(1.0, float(np.max(np.abs(mult))))
    return r, dual, float(max(comp, default=0.0)) / fscale


def _orthonormal_sym(k: int) -> list[np.ndarray]:
    # Frobenius-orthonormal basis of k x k symmetric matrices
    out = []
    for a, b in zip(*np.triu_indices(k)):
        E = np.zeros((k, k))
        if a == b:
            E[a, a] = 1.0
        else:
            E[a, b] = E[b, a] = math.sqrt(0.5)
        out.append(E)
    return out


def _sym_from_orthonormal(k: int, y: np.ndarray) -> np.ndarray:
    return sum((c * E for c, E in zip(y, _orthonormal_sym(k))), np.zeros((k, k)))


def _refine_psd(A, c, x, n_bounded, blocks, max_nfev: int = 50) -> np.ndarray:
    """Pull the free multiplier blocks ``Y_k`` back into the PSD cone.

    The unconstrained-``Y`` least-squares solution can be slightly indefinite
    when a block collapses and its multiplier is not unique. Writing
    ``Y_k = L_k L_k^T`` keeps the cone constraint implicit; the bounded
    nonlinear least-squares problem is started from the clipped solution.
    """
    bases = [(k, start, _orthonormal_sym(k)) for k, start in blocks]
    free = np.ones(A.shape[1], dtype=bool)
    free[:n_bounded] = False
    for k, start, basis in bases:
        free[start:start + len(basis)] = False
    rest = np.flatnonzero(free)
    tril = [np.tril_indices(k) for k, _, _ in bases]

    def unpack(z):
        out = np.zeros(A.shape[1])
        out[:n_bounded] = z[:n_bounded]
        pos = n_bounded
        for (k, start, basis), idx in zip(bases, tril):
            L = np.zeros((k, k))
            L[idx] = z[pos:pos + len(idx[0])]
            pos += len(idx[0])
            Y = L @ L.T
            out[start:start + len(basis)] = [float(np.sum(Y * E)) for E in basis]
        out[rest] = z[pos:]
        return out

    z0 = [np.maximum(x[:n_bounded], 0.0)]
    for (k, start, basis), idx in zip(bases, tril):
        Y = sum((v * E for v, E in zip(x[start:start + len(basis)], basis)), np.zeros((k, k)))
        w, V = np.linalg.eigh(Y)
        # QR of the clipped square root gives a lower-triangular factor
        root = (V * np.sqrt(np.maximum(w, 0.0))).T
        _, Rf = np.linalg.qr(root)
        z0.append(Rf.T[idx])
    z0.append(x[rest])
    z0 = np.concatenate(z0)
    lower = np.full(z0.size, -np.inf)
    lower[:n_bounded] = 0.0
    res = optimize.least_squares(lambda z: A @ unpack(z) + c, z0, bounds=(lower, np.inf),
                                 xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
    return unpack(res.x)


def trace_comparison(g: Graph, W: np.ndarray, kappa: float, cap: float | None | str = "auto") -> dict:
    """Effective noise power of the general, pairwise and isotropic designs."""
    L = laplacian(g)
    general = solve_cov(CovDesignProblem(W, kappa, cap, "general"))
    pairwise = solve_cov(CovDesignProblem(W, kappa, cap, "pairwise", L))
    ldp = solve_cov(CovDesignProblem(W, kappa, cap, "scalar"))
    return {"general": general, "pairwise": pairwise, "ldp": ldp}

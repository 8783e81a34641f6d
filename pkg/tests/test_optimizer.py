import itertools

import numpy as np
import pytest

from conftest import KAPPA
from oracles import analytic_two_agent, brute_force_cov
from corrnoise.graph import Graph, erdos_renyi, laplacian, metropolis_hastings
from corrnoise.optimizer import (
    CovDesignProblem,
    HbcThreatModel,
    InfeasibleProblemError,
    _evaluate,
    candidate,
    design_program,
    kkt_report,
    solve_cov,
    solve_cov_hbc,
    solve_decor,
    solve_ldp,
    trace_comparison,
)
from corrnoise.privacy import PrivacyBudget, inverse_diagonal, verify_budget

CAP = 100 / KAPPA
BUDGET = PrivacyBudget(10.0, 1e-5, 5000, 0.1)


def mh(g):
    return metropolis_hastings(g)


def general(W, cap="auto"):
    return solve_cov(CovDesignProblem(W, KAPPA, cap))


def pairwise(W, L, cap="auto"):
    return solve_cov(CovDesignProblem(W, KAPPA, cap, "pairwise", L))


# ---------------------------------------------------------------- baselines


def test_solve_ldp_examples():
    assert solve_ldp(KAPPA) == pytest.approx(92.103, abs=1e-3)
    assert solve_ldp(1.0) == 1.0
    assert solve_ldp(0.25) == 4.0
    with pytest.raises(ValueError):
        solve_ldp(0.0)


def test_decor_two_agents_analytic():
    g = Graph.complete(2)
    W = mh(g)
    expected = analytic_two_agent(KAPPA, CAP)
    # B (1 - sqrt(0.99)) = 46.1674; the quoted 46.166 is rounded at about 1e-4 relative
    assert expected == pytest.approx(46.166, rel=1e-4)
    assert expected * KAPPA == pytest.approx(0.50126, abs=1e-5)
    s_pair, s_cor = solve_decor(W, laplacian(g), KAPPA)
    R = s_pair * np.eye(2) + s_cor * laplacian(g)
    assert np.trace(W @ R @ W.T) == pytest.approx(expected, rel=1e-6)
    assert verify_budget(R, BUDGET).passed


def test_decor_without_edges_is_ldp():
    W = np.eye(3)
    sol = pairwise(W, np.zeros((3, 3)))
    assert sol.details["sigma_cor2"] == 0.0
    # the final safety projection scales the point by at most 1 + 1e-9
    assert sol.objective == pytest.approx(3 / KAPPA, rel=2e-9)


# ---------------------------------------------------------------- general


def test_identity_mixing_gives_ldp():
    for n in (2, 3, 5):
        sol = general(np.eye(n))
        np.testing.assert_allclose(sol.R_star, np.eye(n) / KAPPA, rtol=1e-6, atol=1e-6 / KAPPA)
        assert sol.objective == pytest.approx(n / KAPPA, rel=1e-6)
    best, _ = brute_force_cov(np.eye(2), KAPPA, CAP)
    assert best == pytest.approx(2 / KAPPA, rel=1e-4)


def test_two_agent_complete_matches_analytic_and_decor():
    g = Graph.complete(2)
    W = mh(g)
    sol = general(W)
    assert sol.objective == pytest.approx(analytic_two_agent(KAPPA, CAP), rel=1e-6)
    assert sol.objective == pytest.approx(pairwise(W, laplacian(g)).objective, rel=1e-6)
    assert sol.cap_active


@pytest.mark.parametrize("g", [Graph.complete(2), Graph.complete(3), Graph.path(3)], ids=["k2", "k3", "p3"])
def test_matches_brute_force_oracle(g):
    W = mh(g)
    sol = general(W)
    best, _ = brute_force_cov(W, KAPPA, CAP)
    assert abs(sol.objective - best) / best < 1e-4
    assert sol.kkt_residual < 1e-7


def test_complete_graph_beats_ldp():
    for n in (3, 5, 8):
        W = mh(Graph.complete(n))
        assert general(W).objective < solve_ldp(KAPPA) * np.trace(W @ W.T)


@pytest.mark.parametrize("n", [4, 8])
def test_complete_graph_general_close_to_pairwise(n):
    g = Graph.complete(n)
    W = mh(g)
    a = general(W).objective
    b = pairwise(W, laplacian(g)).objective
    assert a <= b * (1 + 1e-7)
    assert abs(a - b) / b < 0.01


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ordering_and_budget(seed):
    g = erdos_renyi(8, 0.4, seed)
    W = mh(g)
    res = trace_comparison(g, W, KAPPA)
    gen, pw, ldp = (res[k].objective for k in ("general", "pairwise", "ldp"))
    assert gen <= pw * (1 + 1e-7)
    assert pw <= ldp * (1 + 1e-7)
    for sol in res.values():
        rep = verify_budget(sol.R_star, BUDGET, rtol=0.0)
        assert rep.passed
        assert inverse_diagonal(sol.R_star).max() <= KAPPA * (1 - 1e-9) * (1 + 1e-12)
        np.testing.assert_array_equal(sol.R_star, sol.R_star.T)
        assert np.linalg.eigvalsh(sol.R_star)[0] > 0
    assert res["general"].kkt_residual < 1e-7


def test_objective_is_trace():
    W = mh(erdos_renyi(6, 0.5, 3))
    sol = general(W)
    assert sol.objective == pytest.approx(np.trace(W @ sol.R_star @ W.T), rel=1e-9)


def test_permutation_equivariance_on_ring():
    g = Graph.ring(6)
    W = mh(g)
    base = general(W).objective
    rng = np.random.default_rng(0)
    for _ in range(2):
        P = np.eye(6)[rng.permutation(6)]
        assert general(P @ W @ P.T).objective == pytest.approx(base, rel=1e-7)
    # rotating a vertex-transitive graph maps W to itself, so R* is invariant too
    S = np.roll(np.eye(6), 1, axis=0)
    R = general(W).R_star
    np.testing.assert_allclose(S @ R @ S.T, R, rtol=1e-4, atol=1e-4 * np.abs(R).max())


def test_full_rank_mixing_leaves_cap_inactive():
    g = Graph.path(4)
    W = mh(g)
    assert np.linalg.matrix_rank(W) == 4
    sol = general(W, cap=None)
    assert sol.cap is None and not sol.cap_active
    assert sol.kkt_residual < 1e-7


def test_infeasible_cap():
    with pytest.raises(InfeasibleProblemError, match="1/kappa"):
        CovDesignProblem(np.eye(2), KAPPA, cap=0.5 / KAPPA)
    with pytest.raises(InfeasibleProblemError):
        CovDesignProblem(np.eye(2), KAPPA, cap=1 / KAPPA)


def test_problem_validation():
    with pytest.raises(ValueError):
        CovDesignProblem(np.eye(2), 0.0)
    with pytest.raises(ValueError):
        CovDesignProblem(np.eye(2), KAPPA, structure="banded")
    with pytest.raises(ValueError):
        CovDesignProblem(np.eye(2), KAPPA, structure="pairwise")
    with pytest.raises(ValueError):
        CovDesignProblem(np.eye(2), KAPPA, cap="big")


def test_deterministic():
    W = mh(erdos_renyi(6, 0.5, 9))
    a, b = general(W), general(W)
    assert a.R_star.tobytes() == b.R_star.tobytes()


# ---------------------------------------------------------------- barrier


def test_barrier_derivatives_match_finite_differences():
    g = Graph.path(3)
    prog = design_program(CovDesignProblem(mh(g), KAPPA))
    theta = prog.basis.vec(np.array([[200.0, -30, 10], [-30, 180, -20], [10, -20, 190]]))
    val, grad, hess = _evaluate(prog, theta, 1)
    h = 1e-4
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        fp, gp, _ = _evaluate(prog, theta + e, 1)
        fm, gm, _ = _evaluate(prog, theta - e, 1)
        assert (fp - fm) / (2 * h) == pytest.approx(grad[k], rel=1e-5, abs=1e-10)
        np.testing.assert_allclose((gp - gm) / (2 * h), hess[:, k], rtol=1e-5, atol=1e-10)
    assert _evaluate(prog, prog.basis.vec(np.eye(3)), 0) is None


# ---------------------------------------------------------------- KKT


def test_kkt_candidates():
    prob = CovDesignProblem(np.eye(3), KAPPA)
    rep = kkt_report(candidate(np.eye(3) / KAPPA, prob))
    assert rep.max_residual < 1e-9
    assert rep.primal_violation == 0.0
    bad = kkt_report(candidate(0.5 * np.eye(3) / KAPPA, prob))
    assert bad.primal_violation == pytest.approx(KAPPA, rel=1e-12)
    assert bad.inverse_diagonal_excess == pytest.approx(KAPPA, rel=1e-12)
    assert set(bad.as_dict()) >= {"stationarity", "dual_violation", "complementarity", "cap_slack", "min_eigenvalue"}


def test_kkt_analytic_two_agent():
    g = Graph.complete(2)
    prob = CovDesignProblem(mh(g), KAPPA)
    a = CAP
    b = np.sqrt(a * a - a / KAPPA)
    rep = kkt_report(candidate(np.array([[a, -b], [-b, a]]), prob))
    assert rep.max_residual < 1e-7


def test_kkt_flags_suboptimal_point():
    g = Graph.complete(3)
    prob = CovDesignProblem(mh(g), KAPPA)
    rep = kkt_report(candidate(2 * np.eye(3) / KAPPA, prob))
    assert rep.stationarity > 1e-3


# ---------------------------------------------------------------- HBC


def test_hbc_single_group_no_coalition_equals_general():
    g = erdos_renyi(6, 0.6, 1)
    W = mh(g)
    hbc = solve_cov_hbc(W, KAPPA, HbcThreatModel([range(6)], 0))
    assert hbc.objective == pytest.approx(general(W).objective, rel=1e-6)


def test_hbc_singleton_groups_full_coalition_is_ldp():
    n = 4
    W = mh(Graph.ring(n))
    sol = solve_cov_hbc(W, KAPPA, HbcThreatModel([[k] for k in range(n)], n - 1))
    np.testing.assert_allclose(np.diag(sol.R_star) * KAPPA, 1.0, rtol=1e-6)
    assert verify_budget(sol.R_star, BUDGET).passed


def test_hbc_nondecreasing_in_q():
    W = mh(Graph.ring(6))
    groups = [[0, 1, 2], [2, 3, 4], [4, 5, 0], [1, 3, 5]]
    objs = [solve_cov_hbc(W, KAPPA, HbcThreatModel(groups, q)).objective for q in range(3)]
    assert objs[0] <= objs[1] * (1 + 1e-7)
    assert objs[1] <= objs[2] * (1 + 1e-7)


def test_hbc_coalition_views_are_private():
    W = mh(Graph.ring(6))
    groups = [[0, 1, 2], [3, 4, 5], [1, 4]]
    sol = solve_cov_hbc(W, KAPPA, HbcThreatModel(groups, 1))
    s2 = sol.details["sigma_mix2"]
    for I in itertools.chain([()], ((a,) for a in range(6))):
        R = s2 * np.eye(6)
        for grp, B in zip(HbcThreatModel(groups, 1).groups, sol.blocks):
            if not set(grp) & set(I):
                idx = np.array(grp)
                R[np.ix_(idx, idx)] += B
        d = inverse_diagonal(R)
        for i in range(6):
            if i not in I:
                assert d[i] <= KAPPA


def test_hbc_coalition_limit_and_validation():
    W = mh(Graph.complete(12))
    with pytest.raises(ValueError, match="smaller q"):
        solve_cov_hbc(W, KAPPA, HbcThreatModel([range(12)], 6), coalition_limit=100)
    with pytest.raises(ValueError):
        HbcThreatModel([[]], 0)
    with pytest.raises(ValueError):
        HbcThreatModel([[0]], -1)

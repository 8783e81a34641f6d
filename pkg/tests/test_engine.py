import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import KAPPA
from corrnoise.covariance import LDP, Pairwise, factorize, materialize, sample_noise
from corrnoise.engine import (
    CSV_HEADER,
    DivergenceError,
    RunConfig,
    clip,
    clip_rows,
    corn_dsgd_run,
    design_noise,
    dsgd_step,
    record_schedule,
    states_at,
    step_size,
    variance_decomposition_probe,
)
from corrnoise.graph import Graph, erdos_renyi, laplacian, metropolis_hastings
from corrnoise.optimizer import solve_ldp
from corrnoise.tasks import QuadraticTask, ZeroGradientTask

W2 = np.full((2, 2), 0.5)


def quad_cfg(n=8, T=200, seed=0, factor=None, **kw):
    g = erdos_renyi(n, 0.5, 1)
    task = QuadraticTask(n)
    kw.setdefault("x0", task.optimum()[0])
    return RunConfig(metropolis_hastings(g), task, T, 0.1, 0.01, seed, factor, **kw)


# ---------------------------------------------------------------- clipping


def test_clip_examples():
    g = np.array([0.03, 0.04])
    assert np.array_equal(clip(g, 0.1), g)
    np.testing.assert_allclose(clip(np.array([0.3, 0.0]), 0.1), [0.1, 0.0], rtol=1e-15)
    assert np.array_equal(clip(np.zeros(3), 0.1), np.zeros(3))
    with pytest.raises(ValueError):
        clip(g, 0.0)


@given(arrays(np.float64, (5, 4), elements=st.floats(-1e6, 1e6)), st.floats(1e-3, 10))
def test_clip_rows_bound_and_direction(G, C):
    out = clip_rows(G, C)
    norms = np.linalg.norm(out, axis=1)
    assert np.all(norms <= C * (1 + 1e-12))
    for g, o in zip(G, out):
        np.testing.assert_allclose(o, clip(g, C), rtol=1e-12, atol=1e-300)
        if np.linalg.norm(g) <= C:
            assert np.array_equal(o, g)
        else:
            # positive multiple of the input
            assert np.all(o * g >= 0)


# ---------------------------------------------------------------- steps


def test_dsgd_step_examples():
    np.testing.assert_array_equal(dsgd_step(np.array([[0.0], [2.0]]), np.zeros((2, 1)), W2, 0.1), [[1.0], [1.0]])
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    G = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(dsgd_step(X, G, np.eye(2), 0.5), X - 0.5 * G)
    W = metropolis_hastings(Graph.ring(5))
    same = np.tile([0.7, -0.2], (5, 1))
    np.testing.assert_allclose(dsgd_step(same, np.zeros((5, 2)), W, 0.3), same, rtol=1e-15)
    with pytest.raises(ValueError):
        dsgd_step(X, G[:1], W2, 0.1)


def test_step_size_and_schedule():
    assert step_size(0.1, 0) == 0.1
    assert step_size(0.1, 3) == pytest.approx(0.05)
    assert step_size(0.1, 99, "constant") == 0.1
    with pytest.raises(ValueError):
        step_size(0.1, 0, "cosine")
    assert record_schedule(5000) == list(range(0, 5001, 10))
    assert record_schedule(7) == list(range(8))
    assert record_schedule(10, 4) == [0, 4, 8, 10]


def test_record_count_matches_schedule():
    traj = corn_dsgd_run(quad_cfg(T=1234))
    its, _ = traj.series("opt_gap")
    assert its.tolist() == traj.schedule == record_schedule(1234)
    assert traj.schedule == list(range(0, 1235, 2))
    assert traj.final("opt_gap") >= 0


def test_config_validation():
    W = metropolis_hastings(Graph.ring(4))
    task = QuadraticTask(4)
    for kw in ({"T": 0}, {"C": 0.0}, {"eta1": -1.0}):
        args = dict(W=W, task=task, T=5, C=0.1, eta1=0.1) | kw
        with pytest.raises(ValueError):
            RunConfig(**args)
    with pytest.raises(ValueError):
        RunConfig(W, QuadraticTask(5), 5, 0.1, 0.1)
    with pytest.raises(ValueError):
        RunConfig(W, task, 5, 0.1, 0.1, factor=factorize(np.eye(3)))


# ---------------------------------------------------------------- runs


def test_zero_noise_matches_noise_free_bit_for_bit():
    a = corn_dsgd_run(quad_cfg(factor=factorize(np.zeros((8, 8)))))
    b = corn_dsgd_run(quad_cfg())
    assert a.final_states.tobytes() == b.final_states.tobytes()
    strip = lambda t: [r for r in t.records if r[1] != "noise_norm2"]
    assert strip(a) == strip(b)


def test_run_matches_hand_loop():
    f = factorize(materialize(LDP(3.0, 8)))
    cfg = quad_cfg(T=25, seed=4, factor=f)
    X = cfg.initial_states()
    for t in range(25):
        G = clip_rows(cfg.task.gradients(X), cfg.C)
        V = sample_noise(f, 4, t, dim=2).v
        X = cfg.W @ (X - step_size(cfg.eta1, t) * (G + V))
    assert corn_dsgd_run(cfg).final_states.tobytes() == X.tobytes()
    assert states_at(cfg, 25).tobytes() == X.tobytes()


def test_mean_preservation():
    n = 7
    W = metropolis_hastings(erdos_renyi(n, 0.5, 3))
    X0 = np.random.default_rng(0).normal(size=(n, 3))
    cfg = RunConfig(W, ZeroGradientTask(n, 3), 300, 0.1, 0.5, x0=None)
    X = X0
    for t in range(300):
        X = dsgd_step(X, np.zeros_like(X), W, step_size(0.5, t))
    np.testing.assert_allclose(X.mean(axis=0), X0.mean(axis=0), atol=1e-12)
    assert np.all(corn_dsgd_run(cfg).final_states == 0)


def test_ldp_covariance_is_isotropic_gaussian_mechanism():
    sigma2 = solve_ldp(KAPPA)
    f = factorize(materialize(LDP(sigma2, 8)))
    np.testing.assert_allclose(f.F, np.sqrt(sigma2) * np.eye(8), rtol=1e-14)
    V = sample_noise(f, 2, 5, dim=2).v
    np.testing.assert_allclose(V, np.sqrt(sigma2) * sample_noise(np.eye(8), 2, 5, dim=2).v, rtol=1e-14)
    design = design_noise("ldp", np.eye(8), np.zeros((8, 8)), KAPPA)
    np.testing.assert_array_equal(design.R, sigma2 * np.eye(8))


def test_determinism_and_seed_sensitivity():
    f = factorize(materialize(LDP(50.0, 8)))
    a = corn_dsgd_run(quad_cfg(seed=3, factor=f))
    b = corn_dsgd_run(quad_cfg(seed=3, factor=f))
    c = corn_dsgd_run(quad_cfg(seed=4, factor=f))
    assert a.records == b.records
    assert "\n".join(a.csv_lines(3, "ldp")) == "\n".join(b.csv_lines(3, "ldp"))
    assert a.records != c.records


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_iteration():
    # gradients overflow at this start, so the first update is already non-finite
    cfg = RunConfig(np.eye(2), QuadraticTask(2), 5, 0.1, 0.1, x0=np.array([1e308, 0.0]))
    with pytest.raises(DivergenceError) as err:
        corn_dsgd_run(cfg)
    assert err.value.iteration == 1
    assert "iteration" in str(err.value)


def test_csv_lines(tmp_path):
    traj = corn_dsgd_run(quad_cfg(T=3))
    lines = traj.csv_lines(seed=3, algorithm="dsgd", epsilon=10.0, p=0.5, config_hash="abc")
    assert lines[0] == CSV_HEADER
    assert lines[1].split(",")[3:] == ["3", "dsgd", "10.0", "0.5", "abc"]
    assert len(lines) == 1 + len(traj.records)
    traj.write_csv(tmp_path / "t.csv", seed=3, algorithm="dsgd")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == CSV_HEADER


# ---------------------------------------------------------------- probe


def test_probe_requires_factor():
    with pytest.raises(ValueError):
        variance_decomposition_probe(quad_cfg(), 3)


def test_probe_zero_noise():
    res = variance_decomposition_probe(quad_cfg(factor=factorize(np.zeros((8, 8)))), 5, redraws=100)
    assert res.noise_variance == 0.0 and res.predicted_noise == 0.0
    assert res.total == pytest.approx(res.noise_free_error, rel=1e-12)


def test_probe_zero_gradient():
    n = 10
    g = erdos_renyi(n, 0.4, 2)
    W = metropolis_hastings(g)
    R = materialize(Pairwise(2.0, 1.5, laplacian(g)))
    cfg = RunConfig(W, ZeroGradientTask(n), 10, 0.1, 0.3, factor=factorize(R))
    # at t = 0 the agents are still at consensus, so only the noise moves them
    res = variance_decomposition_probe(cfg, 0, redraws=20_000)
    assert res.noise_free_error == 0.0
    assert abs(res.total - res.predicted_noise) / res.predicted_noise < 0.02


def test_probe_general_case():
    f = factorize(materialize(LDP(5.0, 8)))
    res = variance_decomposition_probe(quad_cfg(factor=f), 20, redraws=10_000)
    assert res.noise_free_error > 0
    assert res.residual < 0.03


def test_zero_gradient_one_step_monte_carlo():
    # independent one-step runs from a consensus start: x~(1) - x~(0) = -eta W v(0)
    n = 6
    g = erdos_renyi(n, 0.5, 5)
    W = metropolis_hastings(g)
    R = materialize(Pairwise(1.0, 0.8, laplacian(g)))
    f = factorize(R)
    eta, x0 = 0.2, np.full((n, 1), 0.4)
    runs = 100_000
    acc = 0.0
    for seed in range(runs):
        X1 = dsgd_step(x0, sample_noise(f, seed, 0, dim=1).v, W, eta)
        acc += float(np.sum((X1 - x0) ** 2))
    cfg = RunConfig(W, ZeroGradientTask(n), 1, 0.1, eta, runs - 1, f, x0=x0)
    assert X1.tobytes() == corn_dsgd_run(cfg).final_states.tobytes()
    predicted = eta**2 * np.trace(W @ R @ W.T)
    assert abs(acc / runs - predicted) / predicted < 0.02


def test_gap_monotone_in_noise_scale():
    n = 10
    g = erdos_renyi(n, 0.5, 0)
    W = metropolis_hastings(g)
    task = QuadraticTask(n)
    R = materialize(LDP(solve_ldp(KAPPA), n))
    means = []
    for mult in (1, 4, 16):
        f = factorize(mult * R)
        gaps = [corn_dsgd_run(RunConfig(W, task, 300, 0.1, 0.01, s, f, x0=task.optimum()[0])).final("opt_gap")
                for s in range(10)]
        means.append(np.mean(gaps))
    assert means[0] <= means[1] <= means[2]


# ---------------------------------------------------------------- designs


def test_design_noise_algorithms():
    g = erdos_renyi(6, 0.5, 0)
    W, L = metropolis_hastings(g), laplacian(g)
    designs = {a: design_noise(a, W, L, KAPPA) for a in ("dsgd", "ldp", "decor", "corn")}
    assert designs["dsgd"].factor is None
    tr = {a: np.trace(W @ d.R @ W.T) for a, d in designs.items() if d.R is not None}
    assert tr["corn"] <= tr["decor"] * (1 + 1e-7) <= tr["ldp"] * (1 + 1e-7)
    for d in designs.values():
        assert all(isinstance(v, (int, float, str, bool, type(None))) for v in d.summary.values())
    with pytest.raises(ValueError):
        design_noise("sgd", W, L, KAPPA)

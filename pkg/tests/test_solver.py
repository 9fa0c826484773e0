import numpy as np
import pytest
from scipy.optimize import minimize_scalar

import sap
from sap.core import UnfoldedMatrix
from sap.prior import PriorConfig, RandomConvExtractor
from sap.solver import (
    AnomalyPriorHandle,
    BaselineConfig,
    SolverConfig,
    SolverDivergence,
    a_step,
    denoise_subspace,
    e_step,
    estimate_noise,
    j_step,
    l21_objective,
    l_step,
    prox_l21,
    solve,
    solve_l21,
)


def nesterov_descent(d, phi, a, j, l, alpha, max_steps=100_000, tol=1e-12):
    """Independent first-order minimizer of the E sub-objective."""
    nb = d.shape[1]
    lip = np.linalg.norm(d, 2) ** 2 + alpha
    e = np.zeros((nb, phi.shape[1]))
    y = e.copy()
    t = 1.0
    for _ in range(max_steps):
        grad = d.T @ (d @ y - (phi - a)) + alpha * (y - j) - l
        e_new = y - grad / lip
        t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
        y = e_new + ((t - 1) / t_new) * (e_new - e)
        if np.linalg.norm(e_new - e) <= tol * max(1.0, np.linalg.norm(e_new)):
            return e_new
        e, t = e_new, t_new
    return e


# ---------------------------------------------------------------------------
# E step


def test_e_step_identity_dictionary():
    d = np.eye(2)
    phi = np.array([[2.0], [4.0]])
    e = e_step(d, phi, np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((2, 1)), 1.0)
    np.testing.assert_allclose(e, [[1.0], [2.0]])


def test_e_step_normal_equations_residual():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(20, 15))
    phi = rng.normal(size=(20, 9))
    a = rng.normal(size=(20, 9))
    j = rng.normal(size=(15, 9))
    l = rng.normal(size=(15, 9))
    e = e_step(d, phi, a, j, l, 1.0)
    rhs = d.T @ (phi - a) + j + l
    lhs = (d.T @ d + np.eye(15)) @ e
    assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) < 1e-10


def test_e_step_wide_route_matches_tall_route():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(6, 40))  # nb > dim: Gram-identity route
    phi = rng.normal(size=(6, 7))
    a = rng.normal(size=(6, 7))
    j = rng.normal(size=(40, 7))
    l = rng.normal(size=(40, 7))
    e = e_step(d, phi, a, j, l, 2.0)
    direct = np.linalg.solve(d.T @ d + 2.0 * np.eye(40), d.T @ (phi - a) + 2.0 * j + l)
    np.testing.assert_allclose(e, direct, atol=1e-11)


def test_e_step_matches_gradient_descent_oracle():
    rng = np.random.default_rng(2)
    d = rng.normal(size=(6, 4))
    phi = rng.normal(size=(6, 5))
    a = rng.normal(size=(6, 5))
    j = rng.normal(size=(4, 5))
    l = rng.normal(size=(4, 5))
    closed = e_step(d, phi, a, j, l, 1.0)
    descended = nesterov_descent(d, phi, a, j, l, 1.0)
    np.testing.assert_allclose(closed, descended, atol=1e-5)


def test_e_step_shape_mismatch():
    with pytest.raises(ValueError):
        e_step(np.ones((3, 2)), np.ones((4, 5)), np.zeros((4, 5)), np.zeros((2, 5)), np.zeros((2, 5)), 1.0)


# ---------------------------------------------------------------------------
# noise estimation


def test_noise_estimate_pure_gaussian():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = rng.normal(0.0, 0.1, size=(48, 4096))
        est = estimate_noise(m)
        assert 0.09 <= est.sigma <= 0.11


def test_noise_estimate_noiseless_rank3():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(48, 3)) @ rng.normal(size=(3, 4096))
    assert estimate_noise(m).sigma < 1e-6


def test_noise_estimate_rank5_plus_noise():
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(48, 5)) @ rng.normal(size=(5, 4096)) / np.sqrt(5)
        m += rng.normal(0.0, 0.05, size=m.shape)
        est = estimate_noise(m)
        hits += abs(est.sigma - 0.05) <= 0.0075
        assert est.retained_dim >= 5
    assert hits >= 9


def test_noise_estimate_mean_shift_invariance():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(10, 300))
    a = estimate_noise(m).sigma
    b = estimate_noise(m + 37.5).sigma
    assert abs(a - b) < 1e-10


def test_noise_estimate_needs_four_rows():
    with pytest.raises(ValueError, match="4 rows"):
        estimate_noise(np.ones((3, 10)))


def test_spectrum_sketch_path_matches_dense():
    # tall low-rank matrix exercises the randomized route; the dense route
    # on the transpose-equivalent problem is the oracle
    rng = np.random.default_rng(5)
    base = rng.normal(size=(700, 12)) @ rng.normal(size=(12, 900))
    from sap.solver import _centered, _covariance_spectrum

    xc = _centered(base)
    evals, _ = _covariance_spectrum(xc)
    gram = xc.T @ xc / (xc.shape[1] - 1)
    dense = np.sort(np.maximum(np.linalg.eigvalsh(gram), 0.0))[::-1]
    np.testing.assert_allclose(evals[:12], dense[:12], rtol=1e-9, atol=1e-12)
    assert np.all(evals[12:] < 1e-9)


# ---------------------------------------------------------------------------
# J step


def test_j_step_identity_backend():
    rng = np.random.default_rng(6)
    e = rng.normal(size=(8, 30))
    l = rng.normal(size=(8, 30))
    np.testing.assert_array_equal(j_step(e, l, 2.0, "identity"), e - l / 2.0)


def test_j_step_zero_matrix():
    out = j_step(np.zeros((6, 20)), np.zeros((6, 20)), 1.0, "subspace")
    assert np.all(out == 0.0)


def test_subspace_denoiser_improves_mse():
    rng = np.random.default_rng(7)
    clean = rng.normal(size=(30, 4)) @ rng.normal(size=(4, 500))
    noisy = clean + rng.normal(0.0, 0.3, size=clean.shape)
    sigma = estimate_noise(noisy).sigma
    denoised = denoise_subspace(noisy, sigma)
    mse_noisy = np.mean((noisy - clean) ** 2)
    mse_denoised = np.mean((denoised - clean) ** 2)
    assert mse_denoised < mse_noisy


# ---------------------------------------------------------------------------
# A step


class _RecordingExtractor:
    """Stub extractor that remembers what it saw."""

    def __init__(self, input_bands, feature_dim=4):
        self.input_bands = input_bands
        self.feature_dim = feature_dim
        self.seen = []

    def __call__(self, cube):
        self.seen.append(cube.copy())
        return np.full(self.feature_dim, float(np.abs(cube).sum()))


def test_a_step_zero_coefficients_pass_residual_through():
    rng = np.random.default_rng(8)
    phi = UnfoldedMatrix(rng.normal(size=(4, 64)), 8, 8)
    d = rng.normal(size=(4, 6))
    prior = AnomalyPriorHandle(
        RandomConvExtractor(4, 6, seed=0), PriorConfig(cube_size=4, stride=4, feature_dim=6)
    )
    a, task = a_step(phi, d, np.zeros((6, 64)), prior)
    assert a.shape == (4, 64)
    # E = 0: the target task consumed exactly phi(H)
    z_seen = phi.values.reshape(4, 8, 8)
    np.testing.assert_array_equal(task.anomaly, a.reshape(4, 8, 8))
    support = task.guided_map.mask.astype(bool)
    np.testing.assert_array_equal(a.reshape(4, 8, 8)[:, support], z_seen[:, support])


def test_a_step_all_ones_guided_map_returns_z():
    rng = np.random.default_rng(9)
    phi = UnfoldedMatrix(rng.normal(size=(4, 64)), 8, 8)
    d = rng.normal(size=(4, 6))
    e = rng.normal(size=(6, 64))
    # k = -10 pushes the threshold below the map minimum: all-ones gate
    cfg = PriorConfig(cube_size=4, stride=4, feature_dim=6, threshold_method="mean_plus_k_sigma", k=-10.0)
    prior = AnomalyPriorHandle(RandomConvExtractor(4, 6, seed=1), cfg)
    a, task = a_step(phi, d, e, prior)
    assert task.guided_map.mask.all()
    np.testing.assert_allclose(a, phi.values - d @ e, atol=1e-12)


# ---------------------------------------------------------------------------
# L step and the l2,1 prox


def test_l_step_cases():
    rng = np.random.default_rng(10)
    l = rng.normal(size=(5, 7))
    j = rng.normal(size=(5, 7))
    np.testing.assert_array_equal(l_step(l, j, j, 1.0), l)
    delta = rng.normal(size=(5, 7))
    np.testing.assert_allclose(l_step(np.zeros((5, 7)), delta, np.zeros((5, 7)), 1.0), delta)
    inc1 = l_step(l, j, j - delta, 1.0) - l
    inc2 = l_step(l, j, j - delta, 2.0) - l
    np.testing.assert_allclose(inc2, 2.0 * inc1, atol=1e-12)


def test_prox_l21_shrinks_small_rows_to_zero():
    z = np.array([[0.1, 0.1], [3.0, 4.0]])
    a = prox_l21(z, beta=0.5)
    assert np.all(a[0] == 0.0)
    np.testing.assert_allclose(a[1], (1 - 0.5 / 5.0) * z[1])


def test_prox_l21_beta_zero_identity():
    rng = np.random.default_rng(11)
    z = rng.normal(size=(4, 6))
    np.testing.assert_array_equal(prox_l21(z, 0.0), z)


def test_prox_l21_matches_scalar_minimization_oracle():
    rng = np.random.default_rng(12)
    beta = 0.3
    for _ in range(20):
        z = rng.normal(size=(5, 8))
        got = prox_l21(z, beta)
        for i in range(5):
            # the optimum is colinear with z_i: minimize over its magnitude
            nz = np.linalg.norm(z[i])
            res = minimize_scalar(
                lambda t: beta * abs(t) + 0.5 * (nz - t) ** 2 + 0.5 * 0.0,
                bounds=(0.0, nz + 1.0),
                method="bounded",
                options={"xatol": 1e-12},
            )
            expected = (res.x / nz) * z[i] if nz > 0 else z[i] * 0.0
            np.testing.assert_allclose(got[i], expected, atol=1e-6)


def test_prox_l21_nonexpansive_rows():
    rng = np.random.default_rng(13)
    z = rng.normal(size=(10, 6))
    a = prox_l21(z, 0.7)
    assert np.all(np.linalg.norm(a, axis=1) <= np.linalg.norm(z, axis=1) + 1e-12)


# ---------------------------------------------------------------------------
# full loops


def _toy_problem(seed=0, dim=8, nb=12, h=6, w=6, noise=0.0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(dim, nb))
    phi = UnfoldedMatrix(rng.normal(size=(dim, h * w)) + noise * rng.normal(size=(dim, h * w)), h, w)
    return d, phi


def test_solve_single_iteration_when_tol_infinite():
    d, phi = _toy_problem()
    prior = AnomalyPriorHandle(
        RandomConvExtractor(8, 6, seed=0), PriorConfig(cube_size=3, stride=3, feature_dim=6)
    )
    res = solve(phi, d, prior, SolverConfig(max_iter=30, tol=np.inf))
    assert res.iterations == 1


def test_solve_output_shapes():
    d, phi = _toy_problem(seed=1)
    prior = AnomalyPriorHandle(
        RandomConvExtractor(8, 6, seed=0), PriorConfig(cube_size=3, stride=3, feature_dim=6)
    )
    res = solve(phi, d, prior, SolverConfig(max_iter=3))
    assert res.a.shape == (8, 36)
    assert res.e.shape == (12, 36)
    assert res.detection_map.scores.shape == (6, 6)


def test_solve_residual_bound_on_convergence():
    d, phi = _toy_problem(seed=2)
    prior = AnomalyPriorHandle(
        RandomConvExtractor(8, 6, seed=0), PriorConfig(cube_size=3, stride=3, feature_dim=6)
    )
    cfg = SolverConfig(max_iter=30, tol=1e-4)
    res = solve(phi, d, prior, cfg)
    if res.converged:
        last = res.history[-1]
        assert last.primal_residual < cfg.tol


def test_solve_synthetic_scene_converges(scene_latent):
    latent, dictionary, truth = scene_latent
    prior = AnomalyPriorHandle(RandomConvExtractor(latent.dim, 64, seed=0))
    res = solve(latent.matrix, dictionary, prior)
    assert res.converged and res.iterations <= 30
    assert res.history[-1].primal_residual < 1e-3
    report = sap.evaluate(res.detection_map, truth)
    assert report.auc_pd_pf >= 0.90


def test_solve_divergence_guard():
    d, phi = _toy_problem(seed=3)

    def hostile(m, sigma):
        out = m.copy()
        out[0, 0] = np.nan
        return out

    prior = AnomalyPriorHandle(
        RandomConvExtractor(8, 6, seed=0), PriorConfig(cube_size=3, stride=3, feature_dim=6)
    )
    cfg = SolverConfig(max_iter=5, denoiser=hostile)
    with pytest.raises(SolverDivergence, match="non-finite"):
        solve(phi, d, prior, cfg)


def test_solve_l21_large_beta_kills_anomaly():
    d, phi = _toy_problem(seed=4)
    res = solve_l21(phi, d, BaselineConfig(beta=1e6), SolverConfig(max_iter=5))
    assert np.all(res.a == 0.0)


def test_solve_l21_beta_zero_first_a_is_residual():
    d, phi = _toy_problem(seed=5)
    res = solve_l21(phi, d, BaselineConfig(beta=0.0), SolverConfig(max_iter=1, tol=np.inf))
    np.testing.assert_allclose(res.a, phi.values - d @ res.e, atol=1e-12)


def test_solve_l21_objective_self_consistency():
    d, phi = _toy_problem(seed=6)
    beta = 0.3
    short = solve_l21(phi, d, BaselineConfig(beta), SolverConfig(max_iter=30, tol=1e-10))
    long = solve_l21(phi, d, BaselineConfig(beta), SolverConfig(max_iter=500, tol=1e-14))
    obj_short = l21_objective(phi, d, short.e, short.a, beta)
    obj_long = l21_objective(phi, d, long.e, long.a, beta)
    assert abs(obj_short - obj_long) < 1e-3


def test_solve_without_history_recording():
    d, phi = _toy_problem(seed=8)
    res = solve_l21(phi, d, BaselineConfig(0.2), SolverConfig(max_iter=5, record_history=False))
    assert res.history == []
    assert res.iterations >= 1


def test_solve_multi_iteration_history_records():
    # heavy noise keeps the denoiser active for a few rounds
    rng = np.random.default_rng(7)
    base = rng.normal(size=(16, 3)) @ rng.normal(size=(3, 100))
    phi = UnfoldedMatrix(base + rng.normal(0.0, 0.5, size=(16, 100)), 10, 10)
    d = rng.normal(size=(16, 24))
    res = solve_l21(phi, d, BaselineConfig(0.1), SolverConfig(max_iter=30, tol=1e-9))
    assert len(res.history) == res.iterations
    for rec, it in zip(res.history, range(1, res.iterations + 1)):
        assert rec.iteration == it
        assert np.isfinite(rec.primal_residual) and np.isfinite(rec.data_fit)

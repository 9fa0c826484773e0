"""Acceptance suite: one test per release criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines and timings.
"""

import time

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

import sap
from sap.core import HsiCube, fold, unfold
from sap.dictionary import DictConfig, cluster_probabilities, dual_purify
from sap.metrics import AucReport
from sap.prior import PriorConfig, RandomConvExtractor, mahalanobis_scores
from sap.pseudo import GenConfig, generate_pseudo_anomaly, rasterize_polygon, sample_prism_spec
from sap.solver import AnomalyPriorHandle, BaselineConfig, e_step, estimate_noise, prox_l21, solve, solve_l21

from test_dictionary import _latent_from_points
from test_solver import nesterov_descent


class _Timer:
    def __init__(self, name, limit_s):
        self.name = name
        self.limit_s = limit_s

    def __enter__(self):
        self.t0 = time.monotonic()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.monotonic() - self.t0
        if exc_type is None:
            print(f"PASS {self.name} ({elapsed:.2f} s)")
            assert elapsed < self.limit_s, f"{self.name}: {elapsed:.1f} s exceeds {self.limit_s} s"
        else:
            print(f"FAIL {self.name} ({elapsed:.2f} s)")
        return False


def test_auc_composite_arithmetic():
    with _Timer("auc-composite-arithmetic", limit_s=1.0):
        top = AucReport(0.99586, 0.50340, 0.01431)
        assert top.auc_oa == pytest.approx(1.48495, abs=1e-3)
        assert top.auc_snpr == pytest.approx(35.178, abs=1e-3)
        base = AucReport(0.91458, 0.22468, 0.08012)
        assert base.auc_oa == pytest.approx(1.05914, abs=1e-3)
        assert base.auc_snpr == pytest.approx(2.804, abs=1e-3)


def test_e_step_oracle_50_instances():
    with _Timer("e-step-oracle", limit_s=30.0):
        rng = np.random.default_rng(0)
        for _ in range(50):
            dim = int(rng.integers(4, 49))
            nb = int(rng.integers(2, 21))
            n = int(rng.integers(3, 12))
            d = rng.normal(size=(dim, nb))
            phi = rng.normal(size=(dim, n))
            a = rng.normal(size=(dim, n))
            j = rng.normal(size=(nb, n))
            l = rng.normal(size=(nb, n))
            closed = e_step(d, phi, a, j, l, 1.0)
            rhs = d.T @ (phi - a) + j + l
            res = np.linalg.norm((d.T @ d + np.eye(nb)) @ closed - rhs) / np.linalg.norm(rhs)
            assert res < 1e-10
            descended = nesterov_descent(d, phi, a, j, l, 1.0)
            assert np.max(np.abs(closed - descended)) < 1e-5


def test_prox_l21_oracle_20_instances():
    with _Timer("prox-l21-oracle", limit_s=5.0):
        rng = np.random.default_rng(1)
        beta = 0.3
        for _ in range(20):
            z = rng.normal(size=(5, 8))
            got = prox_l21(z, beta)
            for i in range(5):
                nz = np.linalg.norm(z[i])
                res = minimize_scalar(
                    lambda t: beta * abs(t) + 0.5 * (nz - t) ** 2,
                    bounds=(0.0, nz + 1.0),
                    method="bounded",
                    options={"xatol": 1e-12},
                )
                expected = (res.x / nz) * z[i]
                np.testing.assert_allclose(got[i], expected, atol=1e-6)


def test_noise_estimation_accuracy():
    with _Timer("noise-estimation", limit_s=30.0):
        for sigma in (0.01, 0.05, 0.1):
            hits = 0
            for seed in range(10):
                rng = np.random.default_rng(seed)
                m = rng.normal(size=(48, 5)) @ rng.normal(size=(5, 4096)) / np.sqrt(5)
                m += rng.normal(0.0, sigma, size=m.shape)
                est = estimate_noise(m)
                hits += abs(est.sigma - sigma) <= 0.15 * sigma
            assert hits >= 9, f"sigma={sigma}: only {hits}/10 within 15%"


def test_synthetic_end_to_end():
    with _Timer("synthetic-end-to-end", limit_s=60.0):
        cube, truth = sap.make_synthetic_scene()
        cube = sap.normalize(cube)
        latent, dictionary = sap.build_dictionary(cube, DictConfig())
        prior = AnomalyPriorHandle(RandomConvExtractor(latent.dim, 64, seed=0))
        result = solve(latent.matrix, dictionary, prior)
        assert result.iterations <= 30
        assert result.history[-1].primal_residual < 1e-3
        report = sap.evaluate(result.detection_map, truth)
        assert report.auc_pd_pf >= 0.90, f"auc_pd_pf={report.auc_pd_pf:.4f}"


def test_ablation_direction():
    with _Timer("ablation-direction", limit_s=120.0):
        cube, truth = sap.make_synthetic_scene()
        cube = sap.normalize(cube)
        latent, dictionary = sap.build_dictionary(cube, DictConfig())
        prior = AnomalyPriorHandle(RandomConvExtractor(latent.dim, 64, seed=0))
        sap_auc = sap.evaluate(solve(latent.matrix, dictionary, prior).detection_map, truth).auc_pd_pf
        best_baseline = -np.inf
        for beta in (0.1, 0.3, 1.0):
            res = solve_l21(latent.matrix, dictionary, BaselineConfig(beta))
            auc = sap.evaluate(res.detection_map, truth).auc_pd_pf
            best_baseline = max(best_baseline, auc)
        assert best_baseline <= sap_auc + 0.02, f"baseline {best_baseline:.4f} vs prior {sap_auc:.4f}"


def test_pseudo_anomaly_invariants():
    with _Timer("pseudo-anomaly-invariants", limit_s=60.0):
        dims = (48, 64, 64)
        m, n = dims[1], dims[2]
        cfg = GenConfig()
        for seed in range(10_000):
            spec = sample_prism_spec(seed, dims, cfg)
            assert 3 <= spec.vertices.shape[0] <= 8
            assert 1 <= spec.band_count <= 48
            assert 0 <= spec.band_start <= 48 - spec.band_count
            frac = rasterize_polygon(spec.vertices, (m, n)).sum() / (m * n)
            assert 0.005 <= frac <= 0.05

        rng = np.random.default_rng(7)
        x = HsiCube(rng.random(dims))
        for seed in range(100):
            spec = sample_prism_spec(seed, dims, cfg)
            y = generate_pseudo_anomaly(x, spec)
            diff = y.data != x.data
            footprint = rasterize_polygon(spec.pasted_vertices(), (m, n))
            bands = np.zeros(48, dtype=bool)
            bands[spec.band_start : spec.band_start + spec.band_count] = True
            assert not diff[~bands].any()
            assert not diff[:, ~footprint].any()


def test_dual_purify_rules():
    with _Timer("dual-purify-rules", limit_s=5.0):
        rng = np.random.default_rng(2)
        for trial in range(20):
            n_pts = int(rng.integers(60, 200))
            dim = int(rng.integers(2, 6))
            k = int(rng.integers(2, 6))
            pts = rng.normal(size=(n_pts, dim)) * rng.uniform(0.5, 2.0)
            latent = _latent_from_points(pts)
            cfg = DictConfig(n_clusters=k, drop_quantile=0.1, seed=trial)
            assignments, probs = cluster_probabilities(latent, cfg)
            ids, counts = np.unique(assignments, return_counts=True)
            smallest = ids[np.argmin(counts)]
            d = dual_purify(latent, assignments, probs, cfg)
            assert not np.any(assignments[d.atom_pixel_ids] == smallest)
            last_nb = None
            for q in (0.0, 0.1, 0.3, 0.5):
                cfg_q = DictConfig(n_clusters=k, drop_quantile=q, seed=trial)
                nb = dual_purify(latent, assignments, probs, cfg_q).nb
                if last_nb is not None:
                    assert nb <= last_nb
                last_nb = nb


def test_mahalanobis_and_roundtrip_property_suites():
    with _Timer("mahalanobis-affine-and-roundtrip", limit_s=30.0):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            k = int(rng.integers(8, 40))
            f = int(rng.integers(2, 7))
            feats = rng.normal(size=(k, f))
            base = mahalanobis_scores(feats, eps_rel=1e-12)
            while True:
                t = rng.normal(size=(f, f))
                if abs(np.linalg.det(t)) > 0.1:
                    break
            moved = feats @ t.T + rng.normal(size=f)
            np.testing.assert_allclose(mahalanobis_scores(moved, eps_rel=1e-12), base, rtol=1e-6, atol=1e-6)

        for _ in range(1000):
            b = int(rng.integers(1, 6))
            h = int(rng.integers(1, 7))
            w = int(rng.integers(1, 7))
            cube = HsiCube(rng.random((b, h, w)))
            assert np.array_equal(fold(unfold(cube)).data, cube.data)

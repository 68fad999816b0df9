import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from lowrank_vcm.basis import Dictionary, composite_gauss_legendre
from lowrank_vcm.experiments import (
    ExperimentReport,
    bound_check,
    fit_loglog,
    frobenius_error,
    lambda_grid_compare,
    mc_sigma_norms,
    mse_l2,
    noise_matrices,
    parse_grid,
    pointwise_error,
    rate_study,
    spectral_norm,
)
from lowrank_vcm.model import VCFunction
from lowrank_vcm.simulate import (
    Scenario,
    evaluate_functions,
    ground_truth_matrix,
    make_coefficients,
    sample_dataset,
)
from lowrank_vcm.solver import zero_threshold

TRIG = Scenario(p=4, s=2, coeff_spec={"kind": "trig", "k_max": 2}, sigma=0.5, seed=31)
D5 = Dictionary("fourier", 5)


class TestMetrics:
    def test_frobenius(self, rng):
        A = rng.normal(size=(3, 4))
        assert frobenius_error(A, A) == 0.0
        B = A.copy()
        B[:2, :2] += np.diag([1.0, 2.0])
        assert frobenius_error(B, A) == pytest.approx(5.0)
        C = rng.normal(size=(3, 4))
        ref = sum((C[i, j] - A[i, j]) ** 2 for i in range(3) for j in range(4))
        assert frobenius_error(C, A) == pytest.approx(ref, rel=1e-13)
        with pytest.raises(ValueError):
            frobenius_error(A, A.T)

    def test_mse_zero_for_truth(self):
        fs = make_coefficients(TRIG)
        A0 = ground_truth_matrix(TRIG, D5, fs)
        assert mse_l2(VCFunction(A0, D5), fs) < 1e-20

    def test_mse_unit_residual(self):
        fs = make_coefficients(TRIG)
        A = ground_truth_matrix(TRIG, D5, fs)
        A[:, 1] += 1.0
        assert mse_l2(VCFunction(A, D5), fs) == pytest.approx(1.0, abs=1e-10)

    def test_mse_fine_quadrature(self, rng):
        sc = Scenario(p=3, s=3, coeff_spec={"kind": "spline_free", "degree": 3}, seed=2)
        fs = make_coefficients(sc)
        d = Dictionary("fourier", 7)
        fhat = VCFunction(rng.normal(size=(3, 7)), d)
        q = composite_gauss_legendre(4096)
        diff = fhat(q.nodes) - evaluate_functions(fs, q.nodes)
        ref = q.weights @ np.sum(diff ** 2, axis=1) / 3
        assert mse_l2(fhat, fs) == pytest.approx(ref, rel=1e-6)

    def test_mse_equals_frobenius_over_p_in_span(self, rng):
        fs = make_coefficients(TRIG)
        A0 = ground_truth_matrix(TRIG, D5, fs)
        A = A0 + rng.normal(scale=0.3, size=A0.shape)
        assert mse_l2(VCFunction(A, D5), fs) == pytest.approx(frobenius_error(A, A0) / 4, rel=1e-9)

    def test_pointwise(self):
        fs = [lambda t: 0 * t + 1.0, lambda t: 0 * t, lambda t: 0 * t - 2.0]
        d = Dictionary("fourier", 3)
        A = np.zeros((3, 3))
        A[:, 0] = [1.0, 0.0, -2.0]
        assert pointwise_error(VCFunction(A, d), fs, 0.4) == 0.0
        A[0, 0] += 3.0
        assert pointwise_error(VCFunction(A, d), fs, 0.4) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            pointwise_error(VCFunction(A, d), fs, 1.5)

    @given(st.floats(0, 1), st.integers(0, 2 ** 32 - 1))
    def test_pointwise_triangle_bound(self, t, seed):
        sc = Scenario(p=3, s=3, coeff_spec={"kind": "spline_free"}, seed=5)
        fs = make_coefficients(sc)
        d = Dictionary("fourier", 7)
        A0 = ground_truth_matrix(sc, d, fs)
        A = A0 + np.random.default_rng(seed).normal(size=A0.shape)
        phi = d.evaluate([t])[0]
        rho = evaluate_functions(fs, [t])[0] - A0 @ phi
        bound = np.mean(np.linalg.norm(A - A0, axis=1) * np.linalg.norm(phi) + np.abs(rho))
        assert pointwise_error(VCFunction(A, d), fs, t) <= bound + 1e-12

    @given(arrays(float, (4, 6), elements=st.floats(-10, 10)))
    def test_spectral_norm(self, Z):
        assert spectral_norm(Z) == pytest.approx(np.linalg.norm(Z, 2), rel=1e-8, abs=1e-12)


class TestSigmaNorms:
    def test_noise_free_exact(self):
        sc = TRIG.with_(sigma=0.0)
        r = mc_sigma_norms(sc, D5, 500, 30)
        assert r["mean_sigma"] < 1e-12
        assert r["mean_sigma_R"] > 0

    def test_trials_minimum(self):
        with pytest.raises(ValueError):
            mc_sigma_norms(TRIG, D5, 100, 10)

    def test_noise_matrices_oracle(self, rng):
        data = sample_dataset(TRIG, 50)
        A0 = ground_truth_matrix(TRIG, D5)
        eps = rng.choice([-1.0, 1.0], size=50)
        sR, s = noise_matrices(data, D5, A0, eps)
        phi = D5.evaluate(data.t)
        refR = sum(eps[i] * np.outer(data.W[i], phi[i]) for i in range(50)) / 50
        r = data.y - np.einsum("ij,ij->i", data.W @ A0, phi)
        ref = sum(r[i] * np.outer(data.W[i], phi[i]) for i in range(50)) / 50
        np.testing.assert_allclose(sR, refR, atol=1e-14)
        np.testing.assert_allclose(s, ref, atol=1e-14)

    def test_mean_bound_violation_rate(self):
        sc = Scenario(p=5, s=1, sigma=1.0, seed=3)
        r = mc_sigma_norms(sc, Dictionary("fourier", 5), 2000, 60)
        assert r["violation_rate"] <= 0.5 + 0.1
        assert r["mean_sigma_R"] <= r["bound_sigma_R"]


class TestBoundCheck:
    def test_noise_free_rank_one(self):
        sc = Scenario(p=3, s=1, sigma=0.0, seed=1)
        rep = bound_check(sc, D5, 400, 5)
        assert max(rep.grid[0]["errors"]) < 1e-12
        assert rep.coverage == 1.0

    def test_oracle_nuclear_ratio(self):
        rep = bound_check(TRIG, D5, 1500, 20, lambda_mode="oracle")
        assert rep.extras["lambda_ge_3sigma_fraction"] == 1.0
        assert rep.extras["nuclear_ratio_coverage"] >= 1 - 4 / 9

    def test_monotone_in_n(self):
        rep = bound_check(TRIG, D5, [300, 1000, 3000, 10000], 8)
        assert rep.extras["spearman_rho"] < -0.9
        assert 0.0 <= rep.coverage <= 1.0

    def test_grid_must_increase(self):
        with pytest.raises(ValueError):
            bound_check(TRIG, D5, [1000, 500], 3)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            bound_check(TRIG, D5, 100, 3, lambda_mode="cv")


class TestRateStudy:
    def test_grid_requirements(self):
        with pytest.raises(ValueError):
            rate_study(TRIG, D5, [100, 200, 400], 2)
        with pytest.raises(ValueError):
            rate_study(TRIG, D5, [100, 200, 300, 500], 2)

    def test_fixed_l_report(self):
        rep = rate_study(TRIG.with_(amplitude=5.0), D5, [500, 1000, 2000, 5000], 4)
        assert rep.expected_slope == -1.0
        assert rep.ns == [500, 1000, 2000, 5000]
        assert rep.fitted_slope < -0.5
        csv_lines = rep.to_csv().splitlines()
        assert csv_lines[0] == "n,trial,metric,value,bound"
        assert len(csv_lines) == 1 + 16
        json.loads(rep.to_json())

    def test_select_l_requires_l2_metric(self):
        sc = Scenario(p=1, s=2, coeff_spec={"kind": "spline_free", "knots": 2}, sigma=0.1)
        with pytest.raises(ValueError):
            rate_study(sc, "select_l", [500, 1000, 2000, 5000], 2, metric="frobenius")

    def test_parallel_matches_serial(self):
        a = rate_study(TRIG, D5, [300, 600, 1200, 3000], 3, jobs=1)
        b = rate_study(TRIG, D5, [300, 600, 1200, 3000], 3, jobs=2)
        assert a.to_json() == b.to_json()
        assert a.to_csv() == b.to_csv()


class TestLambdaGrid:
    def test_endpoints_and_ratio(self):
        data = sample_dataset(TRIG, 800)
        thr = zero_threshold(data, D5)
        out = lambda_grid_compare(TRIG, D5, 800, [0.0, 0.05, 0.2, 1.01 * thr])
        assert out["ratio"] >= 1.0
        assert np.linalg.norm(out["rows"][-1]["A_hat"]) == 0.0
        assert out["rows"][0]["rank"] == min(TRIG.p, D5.l)
        with pytest.raises(ValueError):
            lambda_grid_compare(TRIG, D5, 800, [])


class TestHelpers:
    def test_parse_grid(self):
        assert parse_grid("1e3:1e5:5") == [1000, 3162, 10000, 31623, 100000]
        for bad in ("1e3:1e5", "5:1:3", "1:2:x", "1:3:5"):
            with pytest.raises(ValueError):
                parse_grid(bad)

    def test_fit_loglog(self):
        ns = [10, 100, 1000]
        slope, se, deg = fit_loglog(ns, [1.0 / n for n in ns])
        assert slope == pytest.approx(-1.0) and not deg
        assert fit_loglog(ns, [1.0, 1.0, 1.0])[2]
        assert fit_loglog(ns, [0.0, 1.0, 1.0])[2]

    def test_report_runtime_excluded(self):
        rep = ExperimentReport("frobenius", [{"n": 10, "errors": [1.0]}], runtime_seconds=3.2)
        assert "runtime_seconds" not in json.loads(rep.to_json())
        assert json.loads(rep.to_json(include_runtime=True))["runtime_seconds"] == 3.2

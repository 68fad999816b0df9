import math
import pickle
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from lowrank_vcm.basis import Dictionary, DomainError
from lowrank_vcm.model import (
    DataFormatError,
    Dataset,
    Observation,
    ShapeError,
    VCFunction,
    design_inner,
    design_values,
    matrix_from_csv,
    matrix_from_json,
    matrix_to_csv,
    matrix_to_json,
    normalize_covariates,
    predict,
    residuals,
)

finite = st.floats(-5, 5, allow_nan=False)


def random_data(rng, n=40, p=3, l=4):
    W = rng.normal(size=(n, p))
    W /= np.maximum(1.0, np.linalg.norm(W, axis=1))[:, None]
    return Dataset(W, rng.uniform(size=n), rng.normal(size=n)), Dictionary("fourier", l)


class TestObservation:
    def test_norm_check(self):
        Observation(np.array([0.6, 0.8]), 0.2, 1.0)
        with pytest.raises(ValueError):
            Observation(np.array([0.8, 0.8]), 0.2, 1.0)

    def test_t_domain(self):
        with pytest.raises(DomainError):
            Observation(np.array([0.5]), 1.5, 0.0)


class TestDesignInner:
    def test_zero_matrix(self):
        obs = Observation(np.array([0.3, 0.4]), 0.7, 0.0)
        assert design_inner(np.zeros((2, 3)), obs, Dictionary("fourier", 3)) == 0.0

    def test_scalar_case(self):
        obs = Observation(np.array([0.5]), 0.123, 0.0)
        assert design_inner([[3.0]], obs, Dictionary("fourier", 1)) == pytest.approx(1.5)

    def test_explicit_outer_product(self, rng):
        d = Dictionary("polynomial", 4)
        A = rng.normal(size=(3, 4))
        w = rng.normal(size=3)
        w /= 2 * np.linalg.norm(w)
        obs = Observation(w, 0.37, 0.0)
        X = np.outer(w, d.evaluate([0.37])[0])
        assert design_inner(A, obs, d) == pytest.approx(np.trace(A @ X.T), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            design_inner(np.zeros((2, 2)), Observation(np.array([0.5, 0.5]), 0.1, 0.0),
                         Dictionary("fourier", 3))

    @given(arrays(float, (2, 3), elements=finite), arrays(float, (2, 3), elements=finite),
           finite, finite, st.floats(0, 1))
    def test_bilinear(self, A, B, a, b, t):
        d = Dictionary("fourier", 3)
        obs = Observation(np.array([0.6, -0.3]), t, 0.0)
        lhs = design_inner(a * A + b * B, obs, d)
        rhs = a * design_inner(A, obs, d) + b * design_inner(B, obs, d)
        assert lhs == pytest.approx(rhs, abs=1e-9 * (1 + abs(lhs)))

    @given(arrays(float, (3, 5), elements=finite), st.floats(0, 1))
    def test_norm_bound(self, A, t):
        d = Dictionary("fourier", 5)
        w = np.array([0.5, -0.5, 0.5])
        v = design_inner(A, Observation(w, t, 0.0), d)
        bound = np.linalg.norm(w) * d.c_phi * math.sqrt(d.l) * np.linalg.norm(A)
        assert abs(v) <= bound + 1e-9


class TestDataset:
    def test_values_match_loop(self, rng):
        data, d = random_data(rng)
        A = rng.normal(size=(3, 4))
        loop = [design_inner(A, data[i], d) for i in range(data.n)]
        np.testing.assert_allclose(design_values(A, data, d), loop, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(residuals(A, data, d), data.y - np.array(loop), atol=1e-12)

    def test_zero_matrix_residuals(self, rng):
        data, d = random_data(rng)
        np.testing.assert_array_equal(residuals(np.zeros((3, 4)), data, d), data.y)

    def test_exact_model_residuals(self, rng):
        d = Dictionary("fourier", 4)
        A = rng.normal(size=(2, 4))
        W = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]] * 5)
        t = rng.uniform(size=15)
        y = np.einsum("ij,ij->i", W @ A, d.evaluate(t))
        assert np.max(np.abs(residuals(A, Dataset(W, t, y), d))) < 1e-10

    def test_validation(self):
        with pytest.raises(ShapeError):
            Dataset(np.zeros((3, 2)), [0.1, 0.2], [1, 2, 3])
        with pytest.raises(ValueError):
            Dataset([[2.0]], [0.1], [0.0])
        with pytest.raises(DomainError):
            Dataset([[0.5]], [1.2], [0.0])

    def test_immutable_arrays(self, rng):
        data, _ = random_data(rng)
        with pytest.raises(ValueError):
            data.y[0] = 1.0

    def test_phi_cache_by_identity(self, rng):
        data, d = random_data(rng)
        assert data.phi(d) is data.phi(d)
        d2 = Dictionary("fourier", 4)
        np.testing.assert_array_equal(data.phi(d2), data.phi(d))

    def test_phi_cache_threads(self, rng):
        data, d = random_data(rng, n=500)
        out = []
        th = [threading.Thread(target=lambda: out.append(data.phi(d))) for _ in range(8)]
        for x in th:
            x.start()
        for x in th:
            x.join()
        for v in out:
            np.testing.assert_array_equal(v, out[0])

    def test_pickle(self, rng):
        data, _ = random_data(rng)
        d2 = pickle.loads(pickle.dumps(data))
        np.testing.assert_array_equal(d2.W, data.W)

    def test_from_observations(self):
        obs = [Observation(np.array([0.1, 0.2]), 0.5, 1.0), Observation(np.array([0.0, 1.0]), 0.1, 2.0)]
        data = Dataset.from_observations(obs)
        assert (data.n, data.p) == (2, 2)
        assert data[1].y == 2.0


class TestCsv:
    def test_roundtrip_exact(self, rng, tmp_path):
        data, _ = random_data(rng)
        path = tmp_path / "d.csv"
        data.to_csv(path)
        back = Dataset.from_csv(path)
        np.testing.assert_array_equal(back.W, data.W)
        np.testing.assert_array_equal(back.t, data.t)
        np.testing.assert_array_equal(back.y, data.y)
        assert path.read_text().splitlines()[0] == "t,y,w_1,w_2,w_3"

    @pytest.mark.parametrize("text,line", [
        ("", 1),
        ("t,y,x_1\n0.1,1,0.5\n", 1),
        ("t,y,w_1\n0.1,1,0.5\n0.2,1\n", 3),
        ("t,y,w_1\n0.1,abc,0.5\n", 2),
        ("t,y,w_1\n0.1,1,0.5\n-0.1,1,0.5\n", 3),
        ("t,y,w_1,w_2\n0.1,1,0.9,0.9\n", 2),
    ])
    def test_errors_have_line_numbers(self, text, line):
        with pytest.raises(DataFormatError) as exc:
            Dataset.from_csv_string(text)
        assert exc.value.line == line
        assert f"line {line}" in str(exc.value)


class TestVCFunction:
    def test_zero(self):
        f = VCFunction(np.zeros((2, 5)), Dictionary("fourier", 5))
        assert np.all(f(np.linspace(0, 1, 7)) == 0)

    def test_constant_column(self):
        A = np.zeros((3, 5))
        A[:, 0] = [1.0, -2.0, 0.5]
        f = VCFunction(A, Dictionary("fourier", 5))
        for t in (0.0, 0.3, 0.99):
            np.testing.assert_allclose(predict(f, t), [1.0, -2.0, 0.5], atol=1e-14)

    def test_scalar_sum(self, rng):
        d = Dictionary("haar_wavelet", 6)
        A = rng.normal(size=(2, 6))
        phi = d.evaluate([0.42])[0]
        ref = [sum(A[i, j] * phi[j] for j in range(6)) for i in range(2)]
        np.testing.assert_allclose(predict(VCFunction(A, d), 0.42), ref, rtol=1e-12)

    @given(arrays(float, (2, 3), elements=finite), arrays(float, (2, 3), elements=finite), finite)
    def test_linear(self, A, B, a):
        d = Dictionary("fourier", 3)
        lhs = predict(VCFunction(a * A + B, d), 0.3)
        rhs = a * predict(VCFunction(A, d), 0.3) + predict(VCFunction(B, d), 0.3)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_shape(self):
        with pytest.raises(ShapeError):
            VCFunction(np.zeros((2, 4)), Dictionary("fourier", 5))


def test_normalize_covariates():
    W = np.array([[3.0, 4.0], [1.0, 0.0]])
    Ws, scale = normalize_covariates(W)
    assert scale == 5.0
    assert np.max(np.linalg.norm(Ws, axis=1)) == pytest.approx(1.0)


def test_matrix_io(rng, tmp_path):
    A = rng.normal(size=(3, 4))
    matrix_to_csv(A, tmp_path / "A.csv")
    np.testing.assert_array_equal(matrix_from_csv(tmp_path / "A.csv"), A)
    np.testing.assert_array_equal(matrix_from_json(matrix_to_json(A)), A)

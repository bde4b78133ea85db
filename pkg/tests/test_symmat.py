import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_spd, random_sym
from npvol import symmat
from npvol.errors import DimensionError, NumericalError, SingularMatrixError


class TestSymVec:
    def test_scalar_case(self):
        assert np.array_equal(symmat.sym(np.array([3.0])), [[3.0]])

    def test_layout_d2(self):
        assert np.array_equal(symmat.sym(np.array([1.0, 2, 3])), [[1, 2], [2, 3]])

    def test_vec_zero(self):
        assert np.array_equal(symmat.vec(np.zeros((2, 2))), [0, 0, 0])

    def test_vec_layout(self):
        assert np.array_equal(symmat.vec(np.array([[1.0, 2], [2, 3]])), [1, 2, 3])

    def test_roundtrip_random(self):
        gen = np.random.default_rng(0)
        for d in (2, 3, 5):
            for _ in range(100):
                v = gen.normal(size=d * (d + 1) // 2)
                assert np.array_equal(symmat.vec(symmat.sym(v)), v)

    def test_mutual_inverse_all_dims(self):
        gen = np.random.default_rng(1)
        for d in range(1, 21):
            v = gen.normal(size=symmat.tri_len(d))
            assert np.array_equal(symmat.vec(symmat.sym(v)), v)
            s = random_sym(d, gen)
            assert np.array_equal(symmat.sym(symmat.vec(s)), s)

    def test_bad_length(self):
        with pytest.raises(DimensionError):
            symmat.sym(np.array([1.0, 2.0]))

    def test_norm_sandwich(self):
        gen = np.random.default_rng(2)
        for _ in range(50):
            s = random_sym(4, gen)
            nv = np.linalg.norm(symmat.vec(s))
            nf = symmat.frobenius(s)
            assert nv <= nf + 1e-12
            assert nf <= np.sqrt(2.0) * nv + 1e-12

    @given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_roundtrip_property(self, d, seed):
        v = np.random.default_rng(seed).normal(size=symmat.tri_len(d))
        assert np.array_equal(symmat.vec(symmat.sym(v)), v)


class TestSpectral:
    def test_identity(self):
        vals, q = symmat.spectral_decompose(np.eye(2))
        assert np.allclose(vals, [1, 1])
        assert np.allclose(q @ q.T, np.eye(2), atol=1e-12)

    def test_diagonal(self):
        vals, _ = symmat.spectral_decompose(np.diag([2.0, 5.0]))
        assert np.allclose(vals, [2, 5])

    def test_reconstruction_and_order(self):
        gen = np.random.default_rng(3)
        for d in (2, 5, 12):
            s = random_sym(d, gen, scale=3.0)
            vals, q = symmat.spectral_decompose(s)
            assert np.all(np.diff(vals) >= 0)
            resid = symmat.frobenius(q @ np.diag(vals) @ q.T - s)
            assert resid < 1e-10 * max(symmat.frobenius(s), 1.0)
            assert symmat.frobenius(q.T @ q - np.eye(d)) < 1e-10

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericalError):
            symmat.spectral_decompose(np.array([[np.nan, 0], [0, 1.0]]))


class TestMatrixFunctions:
    def test_exp_zero(self):
        assert np.allclose(symmat.mat_exp(np.zeros((3, 3))), np.eye(3), atol=1e-15)

    def test_exp_diagonal(self):
        out = symmat.mat_exp(np.diag([np.log(2.0), np.log(3.0)]))
        assert np.allclose(out, np.diag([2.0, 3.0]), atol=1e-12)

    def test_exp_overflow_reports_eigenvalue(self):
        with pytest.raises(NumericalError, match="eigenvalue"):
            symmat.mat_exp(np.diag([800.0, 0.0]))

    def test_log_identity(self):
        assert np.allclose(symmat.mat_log(np.eye(4)), np.zeros((4, 4)), atol=1e-14)

    def test_log_diagonal(self):
        out = symmat.mat_log(np.diag([np.exp(2.0), np.exp(-1.0)]))
        assert np.allclose(out, np.diag([2.0, -1.0]), atol=1e-12)

    def test_log_singularity_error(self):
        with pytest.raises(SingularMatrixError):
            symmat.mat_log(np.diag([1.0, 1e-13]))

    def test_log_clamp_mode(self):
        out = symmat.mat_log(np.diag([1.0, 1e-13]), clamp=True)
        assert np.isfinite(out).all()

    def test_exp_log_roundtrip(self):
        gen = np.random.default_rng(4)
        for _ in range(50):
            s = random_sym(4, gen)
            s *= min(1.0, 5.0 / max(symmat.frobenius(s), 1e-9))
            assert symmat.frobenius(symmat.mat_log(symmat.mat_exp(s)) - s) < 1e-9

    def test_log_exp_roundtrip_spd(self):
        gen = np.random.default_rng(5)
        for _ in range(50):
            p = random_spd(4, gen)
            back = symmat.mat_exp(symmat.mat_log(p))
            assert symmat.frobenius(back - p) < 1e-8 * symmat.frobenius(p)

    def test_integer_power_identity(self):
        gen = np.random.default_rng(6)
        p = random_spd(3, gen)
        logp = symmat.mat_log(p)
        for t in range(-3, 4):
            via_exp = symmat.mat_exp(t * logp)
            direct = np.linalg.matrix_power(p, t) if t >= 0 else np.linalg.matrix_power(
                np.linalg.inv(p), -t
            )
            assert symmat.frobenius(via_exp - direct) < 1e-9 * max(
                symmat.frobenius(direct), 1.0
            )

    def test_pow_identity_matrix(self):
        assert np.allclose(symmat.mat_pow(np.eye(3), 7.3), np.eye(3), atol=1e-13)

    def test_pow_diagonal_half(self):
        assert np.allclose(
            symmat.mat_pow(np.diag([4.0, 9.0]), 0.5), np.diag([2.0, 3.0]), atol=1e-12
        )

    def test_pow_contracts(self):
        gen = np.random.default_rng(7)
        p = random_spd(4, gen)
        half = symmat.mat_pow(p, 0.5)
        assert symmat.frobenius(half @ half - p) < 1e-9 * symmat.frobenius(p)
        assert symmat.frobenius(symmat.mat_pow(p, -1.0) @ p - np.eye(4)) < 1e-9

    def test_pow_semigroup(self):
        gen = np.random.default_rng(8)
        for _ in range(20):
            p = random_spd(3, gen)
            a, b = gen.normal(), gen.normal()
            left = symmat.mat_pow(p, a) @ symmat.mat_pow(p, b)
            right = symmat.mat_pow(p, a + b)
            assert symmat.frobenius(left - right) < 1e-9 * max(symmat.frobenius(right), 1.0)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_exp_always_spd(self, seed):
        s = random_sym(3, np.random.default_rng(seed), scale=2.0)
        assert symmat.is_spd(symmat.mat_exp(s), eig_floor=0.0)

"""Oracle tests: LTI construction and brute-force full-space FTLEs."""

import numpy as np
import pytest

from eelab import testbeds as tb


class TestLtiSystem:
    def test_zero_matrix(self):
        sys = tb.lti_system(np.zeros((3, 3)))
        u = np.array([1.0, -2.0, 0.5])
        assert np.all(sys.rhs(u) == 0)

    def test_diagonal_rhs(self):
        sys = tb.lti_system(np.diag([0.3, -0.1]))
        np.testing.assert_allclose(sys.rhs(np.ones(2)), [0.3, -0.1])

    def test_skew_preserves_norm(self):
        A = np.array([[0.0, 1.0], [-1.0, 0.0]])
        sys = tb.lti_system(A)
        u, _ = tb.fundamental_matrix(sys, np.array([1.0, 0.0]), T=7.0, dt=0.001)
        assert abs(np.linalg.norm(u) - 1.0) < 1e-9

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            tb.lti_system(np.array([[np.inf, 0.0], [0.0, 1.0]]))


class TestFdJacobianFallback:
    def test_matches_analytic_on_nonlinear_system(self):
        def rhs(u):
            return np.array([u[1], -np.sin(u[0]) - 0.2 * u[1]])

        def japply(u, v):
            J = np.array([[0.0, 1.0], [-np.cos(u[0]), -0.2]])
            return J @ v

        sys_fd = tb.GenericSystem(dim=2, rhs=rhs)
        u = np.array([0.7, -0.3])
        v = np.array([0.4, 1.1])
        np.testing.assert_allclose(sys_fd.jacobian_apply(u, v), japply(u, v),
                                   rtol=1e-7, atol=1e-9)


class TestFullFtleOracle:
    @pytest.mark.parametrize("T", [1.0, 5.0, 20.0])
    def test_diagonal_closed_form(self, T):
        sys = tb.lti_system(np.diag([0.3, -0.1]))
        res = tb.full_ftle_oracle(sys, np.array([1.0, 1.0]), T=T, dt=0.01)
        np.testing.assert_allclose(res.exponents, [0.3, -0.1], atol=1e-8)

    def test_zero_system(self):
        sys = tb.lti_system(np.zeros((2, 2)))
        res = tb.full_ftle_oracle(sys, np.zeros(2), T=3.0, dt=0.01)
        np.testing.assert_allclose(res.exponents, [0.0, 0.0], atol=1e-12)

    def test_three_state_diagonal(self):
        sys = tb.lti_system(np.diag([0.5, 0.1, -0.4]))
        res = tb.full_ftle_oracle(sys, np.ones(3), T=5.0, dt=0.005)
        np.testing.assert_allclose(res.exponents, [0.5, 0.1, -0.4], atol=1e-8)

    def test_normal_matrix_t_independent(self):
        # for normal A the oracle FTLEs equal the eigenvalue real parts
        # for every window length
        rng = np.random.default_rng(0)
        Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        lam = np.array([0.4, -0.2, -0.7])
        A = Q @ np.diag(lam) @ Q.T
        sys = tb.lti_system(A)
        for T in (1.0, 4.0):
            res = tb.full_ftle_oracle(sys, rng.standard_normal(3), T=T, dt=0.002)
            np.testing.assert_allclose(res.exponents, np.sort(lam)[::-1],
                                       atol=1e-8)

    def test_descending_order(self):
        rng = np.random.default_rng(3)
        A = rng.standard_normal((4, 4)) * 0.3
        sys = tb.lti_system(A)
        res = tb.full_ftle_oracle(sys, rng.standard_normal(4), T=2.0, dt=0.005)
        assert np.all(np.diff(res.exponents) <= 1e-12)

    def test_window_composition(self):
        # Psi over [0, T] equals Psi over [T/2, T] times Psi over [0, T/2]
        rng = np.random.default_rng(5)
        A = rng.standard_normal((3, 3)) * 0.4
        sys = tb.lti_system(A)
        u0 = rng.standard_normal(3)
        _, psi_full = tb.fundamental_matrix(sys, u0, T=4.0, dt=0.01)
        u_mid, psi_a = tb.fundamental_matrix(sys, u0, T=2.0, dt=0.01)
        _, psi_b = tb.fundamental_matrix(sys, u_mid, T=2.0, dt=0.01)
        np.testing.assert_allclose(psi_b @ psi_a, psi_full, atol=1e-8)

    def test_overflow_error(self):
        sys = tb.lti_system(np.diag([60.0, 0.0]))
        with pytest.raises(OverflowError):
            tb.full_ftle_oracle(sys, np.ones(2), T=20.0, dt=0.01)

    def test_dim_guard(self):
        with pytest.raises(ValueError):
            tb.GenericSystem(dim=32, rhs=lambda u: u)

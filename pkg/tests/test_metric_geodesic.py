"""Contraction metric evaluation, CCM checks, geodesics, and the feedback QP."""

import numpy as np
import pytest

from tubecert.dynamics import Box, ControlAffineSystem, planar_quadrotor
from tubecert.geodesic import (
    GeodesicSolver, cgl_nodes, cheb_diff_matrix, clenshaw_curtis_weights,
    feedback_gain,
)
from tubecert.metric import CCMReport, ContractionMetric, ccm_check


def constant_metric(m0, lam=0.5):
    m0 = np.asarray(m0, dtype=float)
    w = np.linalg.inv(m0)
    ev = np.linalg.eigvalsh(m0)
    return ContractionMetric(
        exponents=np.zeros((1, m0.shape[0]), dtype=int),
        coeffs=w[None], lam=lam,
        alpha_lower=ev.min(), alpha_upper=ev.max())


class TestChebyshevPieces:
    def test_nodes_span_unit_interval(self):
        s = cgl_nodes(11)
        assert s[0] == 0.0 and np.isclose(s[-1], 1.0)
        assert np.all(np.diff(s) > 0)

    def test_diff_matrix_exact_on_polynomials(self):
        s = cgl_nodes(9)
        d = cheb_diff_matrix(9)
        for p in range(8):
            vals = s ** p
            expect = p * s ** (p - 1) if p else np.zeros_like(s)
            assert np.allclose(d @ vals, expect, atol=1e-9)

    def test_weights_integrate_polynomials(self):
        s = cgl_nodes(9)
        w = clenshaw_curtis_weights(9)
        for p in range(9):
            assert np.isclose(w @ s ** p, 1.0 / (p + 1), atol=1e-12)


class TestPolynomialMetric:
    def test_constant_eval(self):
        met = constant_metric(np.diag([2.0, 0.5]))
        x = np.array([0.3, -0.7])
        assert np.allclose(met.M(x), np.diag([2.0, 0.5]))
        assert np.allclose(met.dW(x), 0.0)
        assert met.is_constant()

    def test_polynomial_eval_and_derivative(self):
        # W(x) = I + x_0 * C1 + x_1^2 * C2
        c1 = np.array([[0.1, 0.02], [0.02, 0.0]])
        c2 = np.array([[0.0, 0.01], [0.01, 0.05]])
        met = ContractionMetric(
            exponents=np.array([[0, 0], [1, 0], [0, 2]]),
            coeffs=np.stack([np.eye(2), c1, c2]),
            lam=0.5, alpha_lower=0.5, alpha_upper=2.0)
        x = np.array([0.4, -0.3])
        expect = np.eye(2) + 0.4 * c1 + 0.09 * c2
        assert np.allclose(met.W(x), expect)
        step = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = step
            fd = (met.W(x + e) - met.W(x - e)) / (2 * step)
            assert np.allclose(met.dW(x)[i], fd, atol=1e-8)
        # dM = -M dW M against finite differences
        for i in range(2):
            e = np.zeros(2)
            e[i] = step
            fd = (met.M(x + e) - met.M(x - e)) / (2 * step)
            assert np.allclose(met.dM(x)[i], fd, atol=1e-7)

    def test_cholesky_factor_convention(self):
        met = constant_metric(np.array([[2.0, 0.3], [0.3, 1.0]]))
        x = np.zeros(2)
        l = met.L(x)
        assert np.allclose(l.T @ l, met.W(x))

    def test_json_roundtrip(self, tmp_path):
        c1 = np.array([[0.1, 0.0], [0.0, 0.2]])
        met = ContractionMetric(
            exponents=np.array([[0, 0], [2, 1]]),
            coeffs=np.stack([np.eye(2), c1]),
            lam=0.7, alpha_lower=0.4, alpha_upper=2.5)
        path = tmp_path / "metric.json"
        met.to_json(path)
        back = ContractionMetric.from_json(path)
        assert np.array_equal(back.exponents, met.exponents)
        assert np.allclose(back.coeffs, met.coeffs)
        assert back.lam == met.lam


class TestCCMCheck:
    def scalar_system(self, a):
        # xdot = a x + u, 1-d
        return ControlAffineSystem(
            n=1, m=1,
            f=lambda x: np.array([a * x[0]]),
            B=lambda x: np.array([[1.0]]),
            jac_f=lambda x: np.array([[a]]),
            jac_B_cols=lambda x: np.zeros((1, 1, 1)))

    def test_killing_zero_for_constant_b_and_metric(self):
        sys, _, box, _ = planar_quadrotor()
        met = constant_metric(np.eye(6), lam=0.1)
        report = ccm_check(met, sys, box, [1, 1, 3, 3, 3, 3])
        assert report.killing_residual == 0.0

    def test_fully_actuated_identity_metric_passes(self):
        # xdot = -x + u in 2-d: B square, no unactuated directions.
        sys = ControlAffineSystem(
            n=2, m=2,
            f=lambda x: -x,
            B=lambda x: np.eye(2),
            jac_f=lambda x: -np.eye(2),
            jac_B_cols=lambda x: np.zeros((2, 2, 2)))
        met = constant_metric(np.eye(2), lam=0.5)
        box = Box(-np.ones(2), np.ones(2))
        report = ccm_check(met, sys, box, 3)
        assert report.all_ok

    def test_contraction_violation_detected(self):
        # unstable scalar drift with no feedback direction left unactuated is
        # impossible, so test via a 2-d system with one input
        sys = ControlAffineSystem(
            n=2, m=1,
            f=lambda x: np.array([x[1], 0.0]),
            B=lambda x: np.array([[0.0], [1.0]]),
            jac_f=lambda x: np.array([[0.0, 1.0], [0.0, 0.0]]),
            jac_B_cols=lambda x: np.zeros((2, 2, 1)))
        box = Box(-np.ones(2), np.ones(2))
        # identity metric cannot contract the unactuated x_0 direction
        met = constant_metric(np.eye(2), lam=0.5)
        report = ccm_check(met, sys, box, 3)
        assert not report.contraction_ok
        # a metric with strong cross term does contract at a small rate
        m_good = np.linalg.inv(np.array([[1.0, -0.45], [-0.45, 0.45]]))
        met2 = constant_metric(m_good, lam=0.05)
        report2 = ccm_check(met2, sys, box, 3)
        assert report2.contraction_ok


class TestGeodesic:
    def test_coincident_endpoints(self):
        met = constant_metric(np.diag([2.0, 1.0]))
        solver = GeodesicSolver(met, n_nodes=9)
        geo = solver.solve(np.array([0.3, 0.4]), np.array([0.3, 0.4]))
        assert geo.energy == pytest.approx(0.0, abs=1e-15)
        assert geo.converged

    def test_flat_metric_straight_line(self):
        m0 = np.array([[2.0, 0.4], [0.4, 1.5]])
        met = constant_metric(m0)
        solver = GeodesicSolver(met, n_nodes=11)
        x_d = np.array([-0.5, 0.2])
        x = np.array([0.7, -0.3])
        geo = solver.solve(x_d, x)
        dx = x - x_d
        assert np.isclose(geo.energy, dx @ m0 @ dx, atol=1e-8)
        line = x_d[None, :] + solver.s[:, None] * dx[None, :]
        assert np.max(np.abs(geo.nodes - line)) <= 1e-8

    def curved_metric(self, lam=0.5):
        # W(x) = I + 0.3 x_0 C, well-conditioned on the unit box
        c = np.array([[0.5, 0.1], [0.1, 0.3]])
        return ContractionMetric(
            exponents=np.array([[0, 0], [1, 0]]),
            coeffs=np.stack([np.eye(2), 0.3 * c]),
            lam=lam, alpha_lower=0.8, alpha_upper=1.3)

    def test_energy_between_eigenvalue_bounds(self):
        met = self.curved_metric()
        solver = GeodesicSolver(met, n_nodes=11)
        rng = np.random.default_rng(0)
        # eigenvalues of M over the unit box
        lo, hi = np.inf, 0.0
        for x0 in np.linspace(-1, 1, 21):
            ev = np.linalg.eigvalsh(met.M(np.array([x0, 0.0])))
            lo, hi = min(lo, ev.min()), max(hi, ev.max())
        for _ in range(20):
            x_d = rng.random(2) * 2 - 1
            x = rng.random(2) * 2 - 1
            geo = solver.solve(x_d, x, use_warm_start=False)
            d2 = np.sum((x - x_d) ** 2)
            assert geo.energy >= lo * d2 - 1e-6 * max(1, d2)
            assert geo.energy <= hi * d2 + 1e-6 * max(1, d2)

    def test_spectral_convergence_in_node_count(self):
        met = self.curved_metric()
        x_d = np.array([-0.8, -0.5])
        x = np.array([0.9, 0.7])
        e11 = GeodesicSolver(met, n_nodes=11).solve(x_d, x).energy
        e22 = GeodesicSolver(met, n_nodes=22).solve(x_d, x).energy
        assert abs(e22 - e11) < 1e-3 * e11

    def test_warm_start_consistency(self):
        met = self.curved_metric()
        solver = GeodesicSolver(met, n_nodes=11)
        x_d = np.array([0.0, 0.0])
        x = np.array([0.8, 0.6])
        cold = solver.solve(x_d, x, use_warm_start=False).energy
        solver.solve(x_d + 0.05, x - 0.05)
        warm = solver.solve(x_d, x).energy
        assert np.isclose(cold, warm, rtol=1e-6, atol=1e-10)


class TestFeedbackGain:
    def scalar_setup(self, drift):
        sys = ControlAffineSystem(
            n=1, m=1,
            f=lambda x: np.array([drift * x[0]]),
            B=lambda x: np.array([[1.0]]),
            jac_f=lambda x: np.array([[drift]]),
            jac_B_cols=lambda x: np.zeros((1, 1, 1)))
        met = constant_metric(np.eye(1), lam=0.5)
        solver = GeodesicSolver(met, n_nodes=7)
        return sys, met, solver

    def test_on_trajectory_zero_gain(self):
        sys, met, solver = self.scalar_setup(-1.0)
        dyn = lambda x, u: sys.f(x) + sys.B(x) @ u
        x_d = np.array([0.4])
        u_d = np.array([0.2])
        geo = solver.solve(x_d, x_d)
        k = feedback_gain(met, dyn, x_d, dyn(x_d, u_d), x_d, u_d, geo)
        assert np.allclose(k, 0.0)

    def test_stable_drift_satisfies_constraint_unaided(self):
        # xdot = -x + u, M = 1, lam = 0.5, x_d = 0: 2x(-x) <= -2*0.5*x^2 holds
        sys, met, solver = self.scalar_setup(-1.0)
        dyn = lambda x, u: sys.f(x) + sys.B(x) @ u
        x_d = np.zeros(1)
        geo = solver.solve(x_d, np.array([1.0]))
        k = feedback_gain(met, dyn, x_d, np.zeros(1), np.array([1.0]),
                          np.zeros(1), geo)
        assert np.allclose(k, 0.0)

    def test_unstable_drift_hand_computed_gain(self):
        # xdot = +x + u: constraint 2(1 + k) <= -1 -> phi0 = 3, phi1 = 2,
        # k = -phi0 phi1 / |phi1|^2 = -1.5
        sys, met, solver = self.scalar_setup(1.0)
        dyn = lambda x, u: sys.f(x) + sys.B(x) @ u
        x_d = np.zeros(1)
        geo = solver.solve(x_d, np.array([1.0]))
        k = feedback_gain(met, dyn, x_d, np.zeros(1), np.array([1.0]),
                          np.zeros(1), geo)
        assert np.allclose(k, [-1.5], atol=1e-9)

    def test_matches_generic_qp_solver(self):
        # analytic projection equals a generic least-norm QP on random data
        rng = np.random.default_rng(1)
        for _ in range(100):
            m = rng.integers(1, 4)
            phi0 = rng.standard_normal() * 2
            phi1 = rng.standard_normal(m)
            if np.linalg.norm(phi1) < 1e-6:
                continue
            analytic = np.zeros(m) if phi0 <= 0 else -phi0 * phi1 / (phi1 @ phi1)
            # generic: minimize |k|^2 s.t. phi0 + phi1 k <= 0 via scipy
            from scipy.optimize import minimize as scipy_min
            res = scipy_min(lambda k: k @ k, np.zeros(m), jac=lambda k: 2 * k,
                            constraints=[{"type": "ineq",
                                          "fun": lambda k: -(phi0 + phi1 @ k),
                                          "jac": lambda k: -phi1}],
                            method="SLSQP",
                            options={"ftol": 1e-14, "maxiter": 200})
            assert np.allclose(res.x, analytic, atol=1e-6)

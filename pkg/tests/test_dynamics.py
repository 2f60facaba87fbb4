"""Plant abstraction, quadrotor benchmark, and integrator tests."""

import numpy as np
import pytest

from tubecert.dynamics import (
    Box, DimensionError, eval_actual, eval_learned, eval_nominal,
    planar_quadrotor, rk4_step,
)

SYS, UNC, BOX, BOUNDS = planar_quadrotor()


def rand_state(rng):
    return BOX.lower + rng.random(6) * BOX.edges


class TestEvalModes:
    def test_hover_balance(self):
        x = np.zeros(6)
        u = np.array([9.81, 0.0])
        assert np.allclose(eval_nominal(SYS, x, u), np.zeros(6), atol=1e-12)

    def test_zero_input_is_f(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rand_state(rng)
            assert np.allclose(eval_nominal(SYS, x, np.zeros(2)), SYS.f(x))

    def test_gravity_at_rest(self):
        # At rest with zero input the only acceleration is -g along body z.
        out = eval_nominal(SYS, np.zeros(6), np.zeros(2))
        assert np.allclose(out, [0, 0, 0, 0, -9.81, 0])

    def test_zero_uncertainty_matches_nominal(self):
        from tubecert.dynamics import UncertaintyField
        zero = UncertaintyField(
            l=1, m=2,
            h=lambda xi, x: np.zeros(2),
            grad_x=lambda xi, x: np.zeros((2, 6)),
            grad_xi=lambda xi, x: np.zeros((2, 1)))
        rng = np.random.default_rng(1)
        for _ in range(10):
            x, u = rand_state(rng), rng.standard_normal(2)
            assert np.allclose(eval_actual(SYS, zero, np.array([0.3]), x, u),
                               eval_nominal(SYS, x, u))

    def test_uncertainty_enters_input_rows(self):
        x = np.zeros(6)
        out = eval_actual(SYS, UNC, np.array([0.0]), x, np.zeros(2))
        expect = SYS.f(x).copy()
        expect[4] += -1.0  # h_1(0, 0) = -1
        expect[5] += 0.3   # h_2(0, .) = 0.3 cos 0
        assert np.allclose(out, expect)

    def test_actual_minus_nominal_is_bh(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            x, u = rand_state(rng), rng.standard_normal(2)
            xi = np.array([rng.random() * 10])
            gap = eval_actual(SYS, UNC, xi, x, u) - eval_nominal(SYS, x, u)
            assert np.allclose(gap, SYS.B(x) @ UNC.h(xi, x), atol=1e-12)

    def test_learned_modes(self):
        rng = np.random.default_rng(3)
        x, u = rand_state(rng), rng.standard_normal(2)
        xi = np.array([1.0])
        zero_mean = lambda xi_, x_: np.zeros(2)
        assert np.allclose(eval_learned(SYS, zero_mean, xi, x, u),
                           eval_nominal(SYS, x, u))
        assert np.allclose(eval_learned(SYS, UNC.h, xi, x, u),
                           eval_actual(SYS, UNC, xi, x, u))

    def test_dimension_errors(self):
        with pytest.raises(DimensionError):
            eval_nominal(SYS, np.zeros(5), np.zeros(2))
        with pytest.raises(DimensionError):
            eval_nominal(SYS, np.zeros(6), np.zeros(3))


class TestJacobians:
    def test_jac_f_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        step = 1e-6
        for _ in range(100):
            x = rand_state(rng)
            analytic = SYS.jac_f(x)
            fd = np.empty((6, 6))
            for j in range(6):
                e = np.zeros(6)
                e[j] = step
                fd[:, j] = (SYS.f(x + e) - SYS.f(x - e)) / (2 * step)
            assert np.allclose(analytic, fd, rtol=1e-5, atol=1e-6)

    def test_jac_b_cols_zero_for_constant_b(self):
        x = np.zeros(6)
        assert np.allclose(SYS.jac_B_cols(x), 0.0)

    def test_pinv_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = rand_state(rng)
            assert np.allclose(SYS.pinv_B(x) @ SYS.B(x), np.eye(2), atol=1e-8)

    def test_uncertainty_gradients_match_fd(self):
        rng = np.random.default_rng(6)
        step = 1e-6
        for _ in range(30):
            x = rand_state(rng)
            t = np.array([rng.random() * 10])
            gx = UNC.grad_x(t, x)
            for j in range(6):
                e = np.zeros(6)
                e[j] = step
                fd = (UNC.h(t, x + e) - UNC.h(t, x - e)) / (2 * step)
                assert np.allclose(gx[:, j], fd, atol=1e-6)
            gxi = UNC.grad_xi(t, x)
            fd = (UNC.h(t + step, x) - UNC.h(t - step, x)) / (2 * step)
            assert np.allclose(gxi[:, 0], fd, atol=1e-6)


class TestRangeSpace:
    def test_uncertainty_in_column_space(self):
        rng = np.random.default_rng(7)
        b = SYS.B(np.zeros(6))
        proj = b @ np.linalg.solve(b.T @ b, b.T)
        for _ in range(50):
            x, u = rand_state(rng), rng.standard_normal(2)
            xi = np.array([rng.random()])
            gap = eval_actual(SYS, UNC, xi, x, u) - eval_nominal(SYS, x, u)
            residual = gap - proj @ gap
            assert np.linalg.norm(residual) <= 1e-10


class TestModelBounds:
    def test_declared_bounds_hold_with_margin(self):
        rng = np.random.default_rng(8)
        n_samples = 10_000
        sup_h = sup_gx = sup_gxi = 0.0
        for _ in range(n_samples):
            x = rand_state(rng)
            t = np.array([rng.random() * 2 * np.pi])
            sup_h = max(sup_h, np.linalg.norm(UNC.h(t, x)))
            sup_gx = max(sup_gx, np.linalg.norm(UNC.grad_x(t, x), 2))
            sup_gxi = max(sup_gxi, np.linalg.norm(UNC.grad_xi(t, x), 2))
        assert sup_h <= BOUNDS.delta_h
        assert sup_gx <= BOUNDS.delta_hx
        assert sup_gxi <= BOUNDS.delta_hxi

    def test_true_uncertainty_magnitude(self):
        # Grid supremum of |h| is 1.53 +- 0.02 and |dh/dt| peaks at 0.3.
        ts = np.linspace(0, 2 * np.pi, 101)
        vxs = np.linspace(-2, 2, 41)
        vzs = np.linspace(-1, 1, 21)
        sup_h = 0.0
        sup_dt = 0.0
        for t in ts:
            for vx in vxs:
                for vz in vzs:
                    x = np.array([0, 0, 0, vx, vz, 0])
                    sup_h = max(sup_h, np.linalg.norm(UNC.h(np.array([t]), x)))
                    sup_dt = max(sup_dt, abs(UNC.grad_xi(np.array([t]), x)[1, 0]))
        assert abs(sup_h - 1.53) <= 0.02
        assert abs(sup_dt - 0.30) <= 0.01


class TestRK4:
    def test_zero_derivative(self):
        x = np.array([1.0, 2.0])
        out = rk4_step(lambda t, x_: np.zeros(2), 0.0, x, 0.1)
        assert np.allclose(out, x)

    def test_constant_derivative_exact(self):
        c = np.array([0.5, -2.0])
        out = rk4_step(lambda t, x_: c, 0.0, np.zeros(2), 0.25)
        assert np.allclose(out, c * 0.25, atol=1e-15)

    def test_exponential_accuracy(self):
        out = rk4_step(lambda t, x_: x_, 0.0, np.array([1.0]), 0.01)
        assert abs(out[0] - np.exp(0.01)) < 1e-10

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            rk4_step(lambda t, x: x, 0.0, np.ones(1), 0.0)


class TestBox:
    def test_ordering_enforced(self):
        with pytest.raises(ValueError):
            Box(np.array([1.0]), np.array([0.0]))

    def test_contains_and_clip(self):
        box = Box(np.array([-1.0, 0.0]), np.array([1.0, 2.0]))
        assert box.contains(np.array([0.0, 1.0]))
        assert not box.contains(np.array([2.0, 1.0]))
        assert np.allclose(box.clip(np.array([5.0, -3.0])), [1.0, 0.0])

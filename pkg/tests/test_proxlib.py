import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrtomo import linops
from mrtomo.proxlib import (
    GRAD_NORM_SQ,
    gradient_op,
    prox_quadratic_conjugate,
    prox_ridge,
    prox_tv_nonneg,
    quadratic_conjugate_fn,
    rescale_prox,
    ridge_fn,
    tv_nonneg_fn,
    tv_value,
)


def tv_prox_reference(xp, w, iters=200000, tol=1e-12):
    """Plain (non-accelerated) dual projected gradient, run to tiny residual.

    Independent oracle for the accelerated inner solver: same dual problem,
    no momentum, fixed step 1/8, stops on the dual residual.
    """
    side = int(round(np.sqrt(xp.size)))
    grad = gradient_op(side)
    d = xp.size
    q = np.zeros(2 * d)
    for _ in range(iters):
        primal = np.maximum(xp - grad.adjoint_apply(q), 0.0)
        q_new = q + (1.0 / 8.0) * grad.apply(primal)
        norms = np.hypot(q_new[:d], q_new[d:])
        shrink = w / np.maximum(norms, w)
        q_new = q_new * np.concatenate([shrink, shrink])
        if np.linalg.norm(q_new - q) <= tol:
            q = q_new
            break
        q = q_new
    return np.maximum(xp - grad.adjoint_apply(q), 0.0)


class TestQuadraticConjugate:
    def test_formula(self):
        assert prox_quadratic_conjugate(np.array([2.0]), 1.0, np.array([0.0])) == 2.0 / 2.0

    def test_fixed_point_minus_b(self, rng):
        b = rng.standard_normal(12)
        for sigma in (0.3, 1.0, 4.0):
            out = prox_quadratic_conjugate(-b, sigma, b)
            assert np.allclose(out, -b, rtol=1e-14, atol=0)

    def test_first_order_optimality(self, rng):
        # gradient of 0.5||y-p||^2 + sigma*(b.y + 0.5||y||^2) vanishes at the output
        p = rng.standard_normal(30)
        b = rng.standard_normal(30)
        sigma = 0.5
        y = prox_quadratic_conjugate(p, sigma, b)
        grad = (y - p) + sigma * (b + y)
        assert np.max(np.abs(grad)) <= 1e-10

    def test_requires_positive_sigma(self):
        with pytest.raises(ValueError):
            prox_quadratic_conjugate(np.zeros(2), 0.0, np.zeros(2))


class TestRidge:
    def test_formula(self):
        assert prox_ridge(np.array([2.0]), 1.0, 1.0) == 1.0

    def test_vanishing_regularizer_limit(self, rng):
        x = rng.standard_normal(6)
        out = prox_ridge(x, 1.0, 1e-14)
        assert np.max(np.abs(out - x)) <= 1e-12

    def test_closed_form_optimality_exact(self, rng):
        x = rng.standard_normal(9)
        sigma, mu_g = 0.7, 2.5
        out = prox_ridge(x, sigma, mu_g)
        assert np.allclose(out + sigma * mu_g * out, x, rtol=1e-15, atol=0)


class TestGradientOp:
    def test_constant_image_zero_field(self):
        op = gradient_op(6)
        assert np.all(op.apply(np.full(36, 1.7)) == 0.0)

    def test_adjoint(self):
        assert linops.adjoint_test(gradient_op(8), trials=20, seed=0) <= 1e-12

    def test_norm_below_classical_bound(self):
        res = linops.power_method(gradient_op(16), tol=1e-9, max_iter=5000, seed=1)
        assert res.norm <= np.sqrt(GRAD_NORM_SQ) + 1e-3

    def test_shapes(self):
        op = gradient_op(5)
        assert op.domain_dim == 25 and op.range_dim == 50


class TestTvProx:
    def test_constant_nonnegative_unchanged(self):
        x = np.full(64, 0.8)
        out = prox_tv_nonneg(x, 0.5, 1.0)
        assert np.max(np.abs(out - x)) <= 1e-12

    def test_negative_constant_projected_to_zero(self):
        x = np.full(64, -1.0)
        out = prox_tv_nonneg(x, 0.5, 1.0)
        assert np.all(out == 0.0)

    def test_output_nonnegative(self, rng):
        x = rng.standard_normal(256)
        out = prox_tv_nonneg(x, 1.0, 0.5)
        assert out.min() >= 0.0

    def test_matches_high_accuracy_oracle_on_step_image(self):
        img = np.zeros((4, 4))
        img[:, 2:] = 1.0
        img[1, 1] = -0.3
        xp = img.ravel()
        sigma, mu_g = 0.8, 0.5
        ours = prox_tv_nonneg(xp, sigma, mu_g, inner_iters=4000, inner_tol=1e-13)
        ref = tv_prox_reference(xp, sigma * mu_g)
        assert np.max(np.abs(ours - ref)) <= 1e-6

    def test_duality_gap_tracks_inner_tol(self, rng):
        xp = rng.random(64) * 2 - 0.3
        sigma, mu_g = 0.6, 1.0
        inner_tol = 1e-9
        out, info = prox_tv_nonneg(
            xp, sigma, mu_g, inner_iters=5000, inner_tol=inner_tol, return_info=True
        )
        w = sigma * mu_g
        primal = 0.5 * np.dot(out - xp, out - xp) + w * tv_value(out, 8)
        q = info["dual"]
        grad = gradient_op(8)
        x_of_q = np.maximum(xp - grad.adjoint_apply(q), 0.0)
        dual = 0.5 * np.dot(x_of_q - xp, x_of_q - xp) + float(
            np.dot(grad.adjoint_apply(q), x_of_q)
        )
        gap = primal - dual
        assert gap >= -1e-12
        assert gap <= 10 * inner_tol * np.dot(xp, xp)


class TestRescale:
    def test_unit_modulus_identity(self, rng):
        base = ridge_fn(1.0)
        rescaled = rescale_prox(base, 1.0)
        p = rng.standard_normal(7)
        assert np.allclose(rescaled.prox(p, 0.7), base.prox(p, 0.7), rtol=1e-15, atol=0)

    def test_ridge_two_evaluation_paths(self):
        # mu_g = 4, sigma = 1, p = 2: rescaled prox equals 2 * prox_{g/4}(1) = 1,
        # matching the unit-strong-convexity closed form sqrt(mu) p / (1 + sigma)
        rescaled = rescale_prox(ridge_fn(4.0), 4.0)
        out = rescaled.prox(np.array([2.0]), 1.0)
        assert out == pytest.approx(1.0, abs=1e-15)
        assert out == pytest.approx(np.sqrt(4.0) * (2.0 / np.sqrt(4.0)) / 2.0, abs=1e-15)

    def test_contraction_factor_is_unit_strongly_convex(self, rng):
        rescaled = rescale_prox(ridge_fn(9.0), 9.0)
        sigma = 0.8
        for _ in range(20):
            a, b = rng.standard_normal(11), rng.standard_normal(11)
            lhs = np.linalg.norm(rescaled.prox(a, sigma) - rescaled.prox(b, sigma))
            rhs = np.linalg.norm(a - b) / (1.0 + sigma)
            assert abs(lhs - rhs) <= 1e-9 * max(1.0, rhs)

    def test_strong_convexity_bookkeeping(self):
        assert rescale_prox(ridge_fn(5.0), 5.0).strong_convexity == pytest.approx(1.0)


class TestProxProperties:
    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), sigma=st.floats(0.05, 5.0))
    def test_nonexpansive(self, seed, sigma):
        rng = np.random.default_rng(seed)
        b = rng.standard_normal(16)
        fns = [
            quadratic_conjugate_fn(b),
            ridge_fn(float(rng.uniform(0.1, 5.0))),
            tv_nonneg_fn(0.5, inner_iters=80, inner_tol=1e-10),
        ]
        a_pt = rng.standard_normal(16)
        b_pt = rng.standard_normal(16)
        for fn in fns:
            lhs = np.linalg.norm(fn.prox(a_pt, sigma) - fn.prox(b_pt, sigma))
            assert lhs <= np.linalg.norm(a_pt - b_pt) * (1.0 + 1e-9) + 1e-9

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), sigma=st.floats(0.05, 5.0), mu=st.floats(0.1, 8.0))
    def test_strongly_convex_contraction(self, seed, sigma, mu):
        rng = np.random.default_rng(seed)
        fn = ridge_fn(mu)
        a_pt = rng.standard_normal(10)
        b_pt = rng.standard_normal(10)
        lhs = np.linalg.norm(fn.prox(a_pt, sigma) - fn.prox(b_pt, sigma))
        bound = np.linalg.norm(a_pt - b_pt) / (1.0 + sigma * mu)
        assert lhs <= bound + 1e-9

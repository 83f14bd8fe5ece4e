import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilevel.core import (BoxBounds, RngSeed, adam_step, gaussian_matrix,
                          make_rng, make_stepper, project_box, sgd_step,
                          stepper_step)
from bilevel.errors import ContractViolationError, NumericError


def reference_adam(x0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Straightforward textbook Adam, kept independent of the library."""
    x = float(x0)
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
        out.append(x)
    return x, out


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        st_ = make_stepper("adam", 3)
        params = np.array([1.0, -2.0, 0.5])
        out = adam_step(st_, params, np.zeros(3), lr=0.1)
        np.testing.assert_array_equal(out, params)
        assert st_.step_count == 1

    @pytest.mark.parametrize("g", [1e-3, 1.0, 1e3, -7.0])
    def test_first_step_magnitude_is_lr(self, g):
        st_ = make_stepper("adam", 1)
        out = adam_step(st_, np.zeros(1), np.array([g]), lr=0.1)
        expect = 0.1 * abs(g) / (abs(g) + 1e-8)
        assert abs(abs(out[0]) - expect) < 1e-12
        assert abs(abs(out[0]) - 0.1) < 1e-6

    def test_quadratic_descent_matches_reference(self):
        st_ = make_stepper("adam", 1)
        x = np.array([1.0])
        ref_x = 1.0
        ref_m = ref_v = 0.0
        for t in range(1, 1001):
            g = 2.0 * x
            x = adam_step(st_, x, g, lr=0.01)
            gr = 2.0 * ref_x
            ref_m = 0.9 * ref_m + 0.1 * gr
            ref_v = 0.999 * ref_v + 0.001 * gr * gr
            ref_x -= 0.01 * (ref_m / (1 - 0.9**t)) / (
                np.sqrt(ref_v / (1 - 0.999**t)) + 1e-8)
        assert abs(x[0] - ref_x) < 1e-12
        assert abs(x[0]) < 0.05

    def test_degenerates_to_sign_descent(self):
        st_ = make_stepper("adam", 4, beta1=0.0, beta2=0.0, eps_hat=1e-12)
        params = np.zeros(4)
        grad = np.array([3.0, -0.2, 1e-4, -50.0])
        out = adam_step(st_, params, grad, lr=0.05)
        np.testing.assert_allclose(out, -0.05 * np.sign(grad), atol=1e-6)

    def test_deterministic(self):
        outs = []
        for _ in range(2):
            st_ = make_stepper("adam", 2)
            p = np.array([0.3, -0.7])
            for _ in range(5):
                p = adam_step(st_, p, 2 * p, lr=0.01)
            outs.append(p)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_dimension_mismatch(self):
        st_ = make_stepper("adam", 3)
        with pytest.raises(ContractViolationError):
            adam_step(st_, np.zeros(3), np.zeros(2), lr=0.1)

    def test_non_finite_gradient(self):
        st_ = make_stepper("adam", 2)
        with pytest.raises(NumericError):
            adam_step(st_, np.zeros(2), np.array([1.0, np.nan]), lr=0.1)

    def test_bad_lr(self):
        st_ = make_stepper("adam", 1)
        with pytest.raises(ContractViolationError):
            adam_step(st_, np.zeros(1), np.ones(1), lr=0.0)

    def test_plain_gd_dispatch(self):
        st_ = make_stepper("plain-gd", 2)
        out = stepper_step(st_, np.array([1.0, 1.0]),
                           np.array([2.0, -2.0]), 0.5)
        np.testing.assert_array_equal(out, [0.0, 2.0])
        assert st_.step_count == 1

    def test_unknown_kind(self):
        with pytest.raises(ContractViolationError):
            make_stepper("rmsprop", 2)


class TestSgd:
    def test_arithmetic(self):
        out = sgd_step(np.array([1.0, 1.0]), np.array([2.0, -2.0]), 0.5)
        np.testing.assert_array_equal(out, [0.0, 2.0])

    def test_zero_gradient(self):
        p = np.array([0.1, -0.4])
        np.testing.assert_array_equal(sgd_step(p, np.zeros(2), 0.3), p)

    def test_scalar_case(self):
        out = sgd_step(np.array([0.3]), np.array([-0.4]), 0.1)
        np.testing.assert_allclose(out, [0.34], rtol=1e-15)


class TestProjectBox:
    def test_clamp(self):
        out = project_box(np.array([6.0, -7.0, 0.0]), BoxBounds(-5, 5))
        np.testing.assert_array_equal(out, [5.0, -5.0, 0.0])

    def test_inside_unchanged(self):
        p = np.array([-4.9, 0.0, 4.9])
        np.testing.assert_array_equal(project_box(p, BoxBounds(-5, 5)), p)

    def test_boundary(self):
        out = project_box(np.array([5.0001]), BoxBounds(-5, 5))
        np.testing.assert_array_equal(out, [5.0])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, xs):
        box = BoxBounds(-5.0, 5.0)
        once = project_box(np.array(xs), box)
        np.testing.assert_array_equal(project_box(once, box), once)

    def test_invalid_box(self):
        with pytest.raises(ContractViolationError):
            BoxBounds(2.0, 2.0)


class TestRandomness:
    def test_gaussian_matrix_deterministic(self):
        a = gaussian_matrix(7, 4, seed=42)
        b = gaussian_matrix(7, 4, seed=42)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, gaussian_matrix(7, 4, seed=43))

    def test_rank_deficient_gram(self):
        A = gaussian_matrix(5, 10, seed=0)
        assert np.linalg.matrix_rank(A.T @ A) == 5

    def test_sample_mean(self):
        A = gaussian_matrix(1000, 1000, seed=7)
        assert abs(A.mean()) < 0.01

    def test_bad_shape(self):
        with pytest.raises(ContractViolationError):
            gaussian_matrix(0, 3, seed=0)

    def test_rng_seed_range(self):
        RngSeed(0)
        RngSeed(2**64 - 1)
        with pytest.raises(ContractViolationError):
            RngSeed(-1)

    def test_make_rng_streams(self):
        a = make_rng(1, 2).standard_normal(4)
        b = make_rng(1, 2).standard_normal(4)
        c = make_rng(1, 3).standard_normal(4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

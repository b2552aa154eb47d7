import numpy as np
import pytest

from fvassoc.diffcore import (
    AdamState,
    adam_step,
    apply_dropout,
    dropout_mask,
    finite_difference_grad,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    make_rng,
    matmul,
    matmul_backward,
    rel_error,
)
from fvassoc.errors import (
    ConfigError,
    DegenerateVectorError,
    NumericError,
    ShapeError,
)


class TestMatmul:
    def test_identity(self):
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(matmul(np.eye(2), b), b)

    def test_hand_computed(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_backward_zero(self):
        a, b = np.ones((2, 3)), np.ones((3, 2))
        ga, gb = matmul_backward(a, b, np.zeros((2, 2)))
        assert not ga.any() and not gb.any()

    def test_backward_scalar(self):
        ga, gb = matmul_backward([[2.0]], [[3.0]], [[1.0]])
        assert ga[0, 0] == 3.0 and gb[0, 0] == 2.0

    def test_backward_matches_finite_differences(self):
        rng = make_rng(11)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        g = rng.standard_normal((3, 2))
        ga, gb = matmul_backward(a, b, g)
        fa = finite_difference_grad(lambda x: float((matmul(x, b) * g).sum()), a)
        fb = finite_difference_grad(lambda x: float((matmul(a, x) * g).sum()), b)
        assert rel_error(ga, fa) <= 1e-6
        assert rel_error(gb, fb) <= 1e-6


class TestL2Normalize:
    def test_three_four_five(self):
        out = l2_normalize_rows([[3.0, 4.0]])
        assert np.allclose(out, [[0.6, 0.8]], atol=1e-15)

    def test_unit_row_unchanged(self):
        row = np.array([[1.0, 0.0, 0.0]])
        assert np.array_equal(l2_normalize_rows(row), row)

    def test_zero_row_rejected(self):
        with pytest.raises(DegenerateVectorError, match="row 1"):
            l2_normalize_rows([[1.0, 2.0], [0.0, 0.0]])

    def test_output_norms_are_one(self):
        rng = make_rng(5)
        x = rng.standard_normal((20, 7)) * 10
        norms = np.linalg.norm(l2_normalize_rows(x), axis=1)
        assert np.max(np.abs(norms - 1.0)) <= 1e-12

    @pytest.mark.parametrize("shape", [(1, 2), (4, 3), (2, 9)])
    def test_backward_matches_finite_differences(self, shape):
        rng = make_rng(sum(shape))
        x = rng.standard_normal(shape) + 2.0
        g = rng.standard_normal(shape)
        gx = l2_normalize_rows_backward(x, g)
        fd = finite_difference_grad(
            lambda z: float((l2_normalize_rows(z) * g).sum()), x
        )
        assert rel_error(gx, fd) <= 1e-5


class TestDropout:
    def test_p_zero_is_identity(self):
        mask = dropout_mask(make_rng(0), (4, 5), 0.0)
        x = make_rng(1).standard_normal((4, 5))
        assert np.array_equal(apply_dropout(x, mask), x)

    def test_kept_fraction_and_scale(self):
        mask = dropout_mask(make_rng(3), (1, 100_000), 0.9)
        kept = mask != 0.0
        assert abs(kept.mean() - 0.1) <= 0.01
        assert np.allclose(mask[kept], 10.0)

    def test_p_one_rejected(self):
        with pytest.raises(ConfigError):
            dropout_mask(make_rng(0), (2, 2), 1.0)


class TestAdam:
    def test_zero_grad_leaves_param(self):
        p = np.array([[1.0, 2.0]])
        state = AdamState.for_param(p)
        out = adam_step(p, np.zeros_like(p), state)
        assert np.array_equal(out, p)

    def test_scalar_first_step(self):
        p = np.array([[1.0]])
        state = AdamState.for_param(p, lr=0.1)
        out = adam_step(p, np.array([[1.0]]), state)
        # bias-corrected first step is lr * sign(grad) up to eps
        assert abs(out[0, 0] - 0.9) <= 1e-6

    def test_determinism(self):
        rng1, rng2 = make_rng(9), make_rng(9)
        p1 = np.ones((3, 3))
        p2 = np.ones((3, 3))
        s1 = AdamState.for_param(p1)
        s2 = AdamState.for_param(p2)
        for _ in range(10):
            g1 = rng1.standard_normal((3, 3))
            g2 = rng2.standard_normal((3, 3))
            p1 = adam_step(p1, g1, s1)
            p2 = adam_step(p2, g2, s2)
        assert np.array_equal(p1, p2)

    def test_step_count_increments(self):
        p = np.zeros((1, 1))
        state = AdamState.for_param(p)
        for expected in (1, 2, 3):
            p = adam_step(p, np.ones((1, 1)), state)
            assert state.step == expected


class TestFiniteDifferences:
    def test_linear(self):
        g = finite_difference_grad(lambda x: float(x.sum()), np.zeros((2, 3)))
        assert np.allclose(g, 1.0, atol=1e-9)

    def test_quadratic(self):
        x = np.array([[1.0, 2.0]])
        g = finite_difference_grad(lambda z: 0.5 * float((z**2).sum()), x)
        assert np.max(np.abs(g - x)) <= 1e-8

    def test_constant(self):
        g = finite_difference_grad(lambda x: 7.0, np.ones((2, 2)))
        assert not g.any()

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            finite_difference_grad(lambda x: float("nan"), np.ones((1, 1)))


def test_rng_is_platform_stable():
    # PCG64 stream for a fixed seed is part of the determinism contract
    vals = make_rng(1234).integers(0, 1_000_000, size=3)
    assert list(vals) == list(make_rng(1234).integers(0, 1_000_000, size=3))

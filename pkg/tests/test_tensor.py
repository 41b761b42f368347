"""Tensor kernel checks against naive loop oracles and hand values."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgdph.tensor import (
    DomainError,
    Rng,
    ShapeMismatchError,
    broadcast_shape,
    conv2d,
    elementwise,
    fold2d,
    matmul,
    moments,
    same_padding,
    unfold2d,
)


def matmul_loops(a, b):
    """Triple-loop reference product, deliberately independent of numpy's @."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_loops(x, w, pads):
    """Six-nested-loop cross-correlation reference, stride 1."""
    pt, pb, pl, pr = pads
    x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = h - kh + 1, wd - kw + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for b in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    s = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                s += x[b, ci, i + u, j + v] * w[co, ci, u, v]
                    out[b, co, i, j] = s
    return out


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(
            elementwise("add", np.array([1.0, 2.0]), np.array([3.0, 4.0])),
            [4.0, 6.0],
        )

    def test_abs(self):
        np.testing.assert_array_equal(
            elementwise("abs", np.array([-0.5, 0.5])), [0.5, 0.5]
        )

    def test_recip(self):
        np.testing.assert_array_equal(
            elementwise("recip", np.array([2.0, 4.0])), [0.5, 0.25]
        )

    def test_relu(self):
        np.testing.assert_array_equal(
            elementwise("relu", np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0]
        )

    def test_broadcast_add(self):
        out = elementwise("add", np.ones((2, 3)), np.array([[10.0], [20.0]]))
        np.testing.assert_array_equal(out, [[11, 11, 11], [21, 21, 21]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2,\).*\(3,\)"):
            elementwise("add", np.zeros(2), np.zeros(3))

    def test_log_of_negative(self):
        with pytest.raises(DomainError):
            elementwise("log", np.array([1.0, -1.0]))

    def test_sqrt_of_negative(self):
        with pytest.raises(DomainError):
            elementwise("sqrt", np.array([-4.0]))

    def test_div_by_zero(self):
        with pytest.raises(DomainError):
            elementwise("div", np.array([1.0]), np.array([0.0]))

    def test_unknown_op(self):
        with pytest.raises(ValueError, match="unknown"):
            elementwise("cosh", np.array([1.0]))


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)

    def test_selector_row(self):
        out = matmul(np.array([[1.0, 0.0]]), np.array([[5.0], [7.0]]))
        np.testing.assert_array_equal(out, [[5.0]])

    def test_against_triple_loop(self):
        rng = Rng(11)
        a = rng.normal((3, 4))
        b = rng.normal((4, 2))
        np.testing.assert_allclose(matmul(a, b), matmul_loops(a, b), rtol=0, atol=1e-14)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeMismatchError, match="inner"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_rejects_1d(self):
        with pytest.raises(ShapeMismatchError):
            matmul(np.zeros(3), np.zeros((3, 2)))


class TestMoments:
    def test_hand_values(self):
        mean, var = moments(np.array([1.0, 2.0, 3.0]), (0,))
        assert mean == pytest.approx(2.0, abs=0)
        assert var == pytest.approx(2.0 / 3.0, rel=1e-15)

    def test_constant(self):
        _, var = moments(np.full((4, 5), 3.7), (0, 1))
        np.testing.assert_array_equal(var, 0.0)

    def test_symmetric_pair(self):
        mean, var = moments(np.array([2.5, -2.5]), (0,))
        assert mean == 0.0
        assert var == pytest.approx(6.25, rel=1e-15)

    def test_population_not_sample(self):
        # n=2: population var of [0,2] is 1, sample var would be 2
        _, var = moments(np.array([0.0, 2.0]), (0,))
        assert var == pytest.approx(1.0, abs=0)

    def test_per_channel_axes(self):
        x = np.arange(24, dtype=np.float64).reshape(2, 3, 2, 2)
        mean, var = moments(x, (0, 2, 3))
        assert mean.shape == (3,)
        for c in range(3):
            np.testing.assert_allclose(mean[c], x[:, c].mean())
            np.testing.assert_allclose(var[c], x[:, c].var())

    def test_bad_axis(self):
        with pytest.raises(ShapeMismatchError):
            moments(np.zeros((2, 2)), (5,))


class TestConv2d:
    def test_identity_kernel(self):
        rng = Rng(3)
        x = rng.normal((2, 1, 4, 4))
        w = np.ones((1, 1, 1, 1))
        np.testing.assert_array_equal(conv2d(x, w), x)

    def test_zero_kernel(self):
        x = Rng(4).normal((1, 2, 3, 3))
        out = conv2d(x, np.zeros((3, 2, 2, 2)))
        np.testing.assert_array_equal(out, np.zeros((1, 3, 2, 2)))

    def test_against_nested_loops_valid(self):
        rng = Rng(7)
        x = rng.normal((1, 1, 4, 4))
        w = rng.normal((1, 1, 3, 3))
        out = conv2d(x, w, padding="valid")
        ref = conv2d_loops(x, w, (0, 0, 0, 0))
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-13)

    def test_against_nested_loops_same_multichannel(self):
        rng = Rng(9)
        x = rng.normal((2, 3, 5, 6))
        w = rng.normal((4, 3, 3, 3))
        out = conv2d(x, w, padding="same")
        assert out.shape == (2, 4, 5, 6)
        ref = conv2d_loops(x, w, same_padding(3, 3))
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)

    def test_same_padding_even_kernel(self):
        # even kernels pad asymmetrically, extra row/col on the lead side
        assert same_padding(2, 2) == (0, 1, 0, 1)
        assert same_padding(3, 3) == (1, 1, 1, 1)
        rng = Rng(13)
        x = rng.normal((1, 1, 4, 4))
        w = rng.normal((1, 1, 2, 2))
        assert conv2d(x, w, padding="same").shape == (1, 1, 4, 4)

    def test_kernel_too_large_valid(self):
        with pytest.raises(ShapeMismatchError, match="larger"):
            conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), padding="valid")

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError, match="channel"):
            conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 2, 2)))

    def test_bad_padding_name(self):
        with pytest.raises(ValueError, match="padding"):
            conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)), padding="full")


class TestUnfoldFold:
    def test_unfold_row_is_receptive_field(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        cols = unfold2d(x, 2, 2, (0, 0, 0, 0))
        assert cols.shape == (9, 4)
        np.testing.assert_array_equal(cols[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(cols[4], [5, 6, 9, 10])

    def test_fold_is_adjoint_of_unfold(self):
        # <unfold(x), c> == <x, fold(c)> for random c: the defining adjoint pair
        rng = Rng(21)
        x = rng.normal((2, 3, 5, 5))
        pads = same_padding(3, 3)
        cols = unfold2d(x, 3, 3, pads)
        c = rng.normal(cols.shape)
        lhs = float(np.sum(cols * c))
        rhs = float(np.sum(x * fold2d(c, x.shape, 3, 3, pads)))
        assert lhs == pytest.approx(rhs, rel=1e-12)


@st.composite
def _shape_triples(draw):
    # three mutually broadcast-compatible shapes over ≤3 axes
    ndim = draw(st.integers(1, 3))
    base = [draw(st.integers(1, 4)) for _ in range(ndim)]

    def variant():
        return tuple(
            d if draw(st.booleans()) else 1 for d in base
        )[draw(st.integers(0, ndim - 1)):]

    return variant(), variant(), variant()


class TestProperties:
    @given(_shape_triples())
    def test_broadcast_associative(self, shapes):
        s1, s2, s3 = shapes
        left = broadcast_shape(broadcast_shape(s1, s2), s3)
        right = broadcast_shape(s1, broadcast_shape(s2, s3))
        assert left == right

    @given(
        st.lists(
            st.floats(-100, 100, allow_nan=False, width=64), min_size=1, max_size=32
        )
    )
    def test_var_identity(self, xs):
        x = np.array(xs, dtype=np.float64)
        mean, var = moments(x, (0,))
        mean2, _ = moments(x * x, (0,))
        scale = max(1.0, float(np.max(np.abs(x))) ** 2)
        assert abs(var - (mean2 - mean * mean)) <= 8 * np.finfo(np.float64).eps * scale

    @settings(deadline=None, max_examples=25)
    @given(st.integers(1, 5), st.integers(0, 4), st.integers(0, 10_000))
    def test_one_hot_conv_selects_channel(self, cin, pick, seed):
        pick = pick % cin
        x = Rng(seed).normal((2, cin, 3, 3))
        w = np.zeros((1, cin, 1, 1))
        w[0, pick, 0, 0] = 1.0
        out = conv2d(x, w)
        np.testing.assert_array_equal(out[:, 0], x[:, pick])


class TestRng:
    def test_same_seed_same_sequence(self):
        a = Rng(42).normal((8,))
        b = Rng(42).normal((8,))
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).normal((8,)), Rng(2).normal((8,)))

    def test_permutation_deterministic(self):
        np.testing.assert_array_equal(Rng(5).permutation(10), Rng(5).permutation(10))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptnet.errors import ConfigError, DimensionError
from ptnet.patching import (
    UnfoldSpec,
    bilinear_matrix,
    fold_overlap,
    grid_to_tokens,
    resize_bilinear,
    resize_bilinear_backward,
    tokens_to_grid,
    unfold,
    unfold_backward,
)
from ptnet.tensor import Rng


def test_unfold_spec_validation():
    assert UnfoldSpec(7).pad == 3
    assert UnfoldSpec(3, 2, padding=0).pad == 0
    for bad in (dict(n=2), dict(n=0), dict(n=3, stride=0), dict(n=3, padding=-1)):
        with pytest.raises(ConfigError):
            UnfoldSpec(**bad)


def test_unfold_n1_is_reshape(rng):
    x = rng.normal((2, 3, 4, 5))
    t = unfold(x, UnfoldSpec(1, 1))
    assert t.shape == (2, 20, 3)
    np.testing.assert_array_equal(t, grid_to_tokens(x))
    np.testing.assert_array_equal(tokens_to_grid(t, 4, 5), x)


def test_unfold_grid_example(rng):
    t = unfold(rng.normal((1, 2, 8, 8)), UnfoldSpec(3, 2, 1))
    assert t.shape == (1, 16, 18)


@pytest.mark.parametrize("n,S", [(1, 1), (3, 1), (3, 2), (7, 1), (7, 2), (5, 3)])
def test_unfold_center_is_grid_pixel(rng, n, S):
    x = rng.normal((2, 3, 9, 7))
    spec = UnfoldSpec(n, S)
    gx, gy = spec.grid(9, 7)
    t = unfold(x, spec).reshape(2, gx, gy, 3, n, n)
    c = n // 2
    np.testing.assert_array_equal(t[..., c, c], x[:, :, ::S, ::S].transpose(0, 2, 3, 1))


def test_unfold_window_layout():
    # channel-major within a token, row-major inside the window, zero padding outside
    x = np.arange(2 * 3 * 3, dtype=np.float64).reshape(1, 2, 3, 3) + 1
    t = unfold(x, UnfoldSpec(3, 1))
    tok = t[0, 0].reshape(2, 3, 3)
    np.testing.assert_array_equal(tok[0], [[0, 0, 0], [0, 1, 2], [0, 4, 5]])
    np.testing.assert_array_equal(tok[1], [[0, 0, 0], [0, 10, 11], [0, 13, 14]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.sampled_from([1, 3, 5, 7]), st.integers(1, 3), st.integers(0, 999))
def test_unfold_token_count_and_linearity(X, Y, n, S, seed):
    r = Rng(seed)
    x, y = r.normal((1, 2, X, Y)), r.child(1).normal((1, 2, X, Y))
    spec = UnfoldSpec(n, S)
    t = unfold(x, spec)
    assert t.shape[1] == -(-X // S) * -(-Y // S)
    np.testing.assert_allclose(unfold(2.5 * x - 1.5 * y, spec), 2.5 * t - 1.5 * unfold(y, spec), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.sampled_from([1, 3, 7]), st.integers(1, 3), st.integers(0, 999))
def test_unfold_adjoint_identity(X, Y, n, S, seed):
    r = Rng(seed)
    spec = UnfoldSpec(n, S)
    x = r.normal((2, 3, X, Y))
    t = r.child(1).normal(unfold(x, spec).shape)
    np.testing.assert_allclose(np.sum(unfold(x, spec) * t), np.sum(x * unfold_backward(t, spec, X, Y)), rtol=1e-10)


def test_tokens_grid_roundtrip(rng):
    x = rng.normal((2, 5, 4, 4)).astype(np.float32)
    t = grid_to_tokens(x)
    assert t.shape == (2, 16, 5)
    np.testing.assert_array_equal(t[0, 5], x[0, :, 1, 1])  # row-major token order
    assert tokens_to_grid(t, 4, 4).tobytes() == x.tobytes()
    with pytest.raises(DimensionError):
        tokens_to_grid(t, 3, 5)


@pytest.mark.parametrize("n,S", [(1, 1), (3, 1), (3, 2), (7, 1), (7, 2)])
def test_fold_overlap_inverts_unfold(rng, n, S):
    x = rng.normal((2, 3, 10, 9)).astype(np.float32)
    spec = UnfoldSpec(n, S)
    np.testing.assert_allclose(fold_overlap(unfold(x, spec), spec, 10, 9), x, atol=1e-5)


def test_fold_overlap_uncovered_pixels_are_zero(rng):
    # a 1x1 window at stride 2 never visits odd rows/columns
    x = rng.normal((1, 1, 6, 6))
    spec = UnfoldSpec(1, 2)
    y = fold_overlap(unfold(x, spec), spec, 6, 6)
    np.testing.assert_array_equal(y[..., ::2, ::2], x[..., ::2, ::2])
    assert not y[..., 1::2, :].any()


@pytest.mark.parametrize("n,S", [(1, 1), (3, 2), (7, 1), (1, 2)])
def test_fold_overlap_constant(n, S):
    spec = UnfoldSpec(n, S)
    x = np.full((1, 2, 8, 8), 0.7)
    y = fold_overlap(unfold(x, spec), spec, 8, 8)
    covered = fold_overlap(unfold(np.ones_like(x), spec), spec, 8, 8) > 0
    np.testing.assert_allclose(y[covered], 0.7)


def test_fold_overlap_shape_error(rng):
    with pytest.raises(DimensionError):
        fold_overlap(rng.normal((1, 5, 9)), UnfoldSpec(3, 1), 4, 4)


# --- resizing ---------------------------------------------------------------


@pytest.mark.parametrize("factor", [2, 0.5])
def test_resize_constant(factor):
    x = np.full((1, 2, 6, 4), 0.3)
    y = resize_bilinear(x, factor=factor)
    np.testing.assert_allclose(y, 0.3, atol=1e-15)
    assert y.shape[2:] == (int(6 * factor), int(4 * factor))


def test_resize_up_closed_form():
    y = resize_bilinear(np.array([[[[0.0, 0.0], [1.0, 1.0]]]]), factor=2)[0, 0]
    np.testing.assert_array_equal(y[:, 0], y[:, 3])  # column-constant
    assert np.all(y[:, 1:] == y[:, :1])
    # half-pixel centers at -1/4, 1/4, 3/4, 5/4 of the input spacing
    np.testing.assert_allclose(y[:, 0], [-0.25, 0.25, 0.75, 1.25], atol=1e-15)


def test_resize_ramp_roundtrip():
    X, Y = 6, 8
    ramp = (0.3 * np.arange(X)[:, None] - 0.2 * np.arange(Y)[None, :] + 1.0)[None, None]
    np.testing.assert_allclose(resize_bilinear(resize_bilinear(ramp, factor=2), factor=0.5), ramp, atol=1e-6)


def test_resize_mean_of_random(rng):
    x = rng.uniform(size=(1, 1, 16, 16))
    for f in (2, 0.5):
        assert abs(resize_bilinear(x, factor=f).mean() / x.mean() - 1) < 0.02


def test_resize_errors():
    with pytest.raises(DimensionError):
        resize_bilinear(np.zeros((1, 1, 5, 4)), factor=0.5)
    with pytest.raises(ConfigError):
        resize_bilinear(np.zeros((1, 1, 4, 4)), factor=3)


def test_resize_to_arbitrary_size_and_nearest(rng):
    x = rng.normal((1, 1, 5, 3))
    assert resize_bilinear(x, (10, 6)).shape == (1, 1, 10, 6)
    up = resize_bilinear(x, factor=2, mode="nearest")
    np.testing.assert_array_equal(up, x.repeat(2, axis=2).repeat(2, axis=3))


@pytest.mark.parametrize("mode", ["bilinear", "nearest"])
def test_resize_backward_is_adjoint(rng, mode):
    x = rng.normal((2, 3, 5, 6))
    g = rng.child(1).normal((2, 3, 10, 3))
    lhs = np.sum(resize_bilinear(x, (10, 3), mode=mode) * g)
    assert lhs == pytest.approx(np.sum(x * resize_bilinear_backward(g, (5, 6), mode=mode)), rel=1e-12)


def test_bilinear_matrix_rows_sum_to_one():
    for n_in, n_out in ((4, 8), (8, 4), (5, 3), (1, 4)):
        np.testing.assert_allclose(bilinear_matrix(n_in, n_out).sum(axis=1), 1.0)

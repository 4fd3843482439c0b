"""Autodiff tape, structured ops, and the finite-difference checker."""

import numpy as np
import pytest

from depthgeo import tensor as T
from depthgeo.tensor import (Tensor, as_tensor, avg_pool2, bilinear_sample,
                             conv2d, finite_diff_check, parameter, upsample2)


# ---------------------------------------------------------------------------
# basic tape mechanics


def test_scalar_chain_rule():
    x = parameter(3.0)
    y = (x * x + 2.0 * x + 1.0)  # (x+1)^2, dy/dx = 2x+2
    y.backward()
    assert np.allclose(y.data, 16.0)
    assert np.allclose(x.grad, 8.0)


def test_broadcast_grad_sums_to_parent_shape():
    a = parameter(np.ones((4, 1)))
    b = parameter(np.ones((1, 5)))
    out = T.tsum(a * b)
    out.backward()
    assert a.grad.shape == (4, 1)
    assert b.grad.shape == (1, 5)
    assert np.allclose(a.grad, 5.0)
    assert np.allclose(b.grad, 4.0)


def test_diamond_graph_accumulates():
    x = parameter(2.0)
    y = x * x
    z = y + y  # two paths through y
    z.backward()
    assert np.allclose(x.grad, 8.0)


def test_backward_requires_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_detach_blocks_gradient():
    x = parameter(2.0)
    out = x * x.detach()
    out.backward()
    assert np.allclose(x.grad, 2.0)  # only the live factor contributes


def test_tmax_routes_to_first_argmax():
    x = parameter(np.array([1.0, 5.0, 5.0, 2.0]))
    T.tmax(x).backward()
    assert np.allclose(x.grad, [0.0, 1.0, 0.0, 0.0])


def test_tmean_axis_tuple():
    rng = np.random.default_rng(0)
    x = parameter(rng.normal(size=(2, 3, 4)))
    out = T.tmean(x, axis=(0, 2))
    assert out.shape == (3,)
    assert np.allclose(out.data, x.data.mean(axis=(0, 2)))
    T.tsum(out).backward()
    assert np.allclose(x.grad, 1.0 / 8.0)


def test_sigmoid_saturates_exactly():
    # the gate-forcing identities rely on exact 0/1 at huge logits
    x = as_tensor(np.array([-1e4, 1e4]))
    out = T.sigmoid(x)
    assert out.data[0] == 0.0
    assert out.data[1] == 1.0


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = as_tensor(rng.normal(size=(5, 7)) * 30.0)
    s = T.softmax(x, axis=-1)
    assert np.allclose(s.data.sum(axis=-1), 1.0)
    assert (s.data >= 0.0).all()


# ---------------------------------------------------------------------------
# finite_diff_check itself


def test_gradcheck_quadratic_is_tight():
    rng = np.random.default_rng(2)
    p = parameter(rng.normal(size=(4, 3)))
    rep = finite_diff_check(lambda: T.tsum(p * p), [p])
    assert rep.ok
    assert rep.max_rel_err < 1e-6


def test_gradcheck_rejects_bad_eps():
    p = parameter(1.0)
    with pytest.raises(ValueError):
        finite_diff_check(lambda: p * p, [p], eps=0.0)


def test_gradcheck_flags_nonfinite_loss():
    p = parameter(0.0)
    rep = finite_diff_check(lambda: T.log(p), [p])
    assert not rep.ok


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_ops_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.uniform(0.2, 2.0, (3, 4)))
    y = parameter(rng.uniform(0.2, 2.0, (3, 4)))

    def loss():
        out = T.exp(x * 0.3) + T.log(y) + T.sqrt(x) * T.tanh(y)
        out = out + T.sigmoid(x - y) + T.sin(x) * T.cos(y)
        out = out + x ** 1.7 + T.relu(x - 1.0) + T.absolute(y - 1.0)
        return T.tmean(out / (y + 1.0))

    rep = finite_diff_check(loss, [x, y])
    assert rep.ok, rep


@pytest.mark.parametrize("seed", range(5))
def test_matmul_and_shaping_gradcheck(seed):
    rng = np.random.default_rng(100 + seed)
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4, 2)))
    v = parameter(rng.normal(size=4))

    def loss():
        out = T.matmul(a, b)
        out = T.concat([out, T.transpose(out)[:, :2]], axis=0)
        out = out.reshape(-1)
        out = T.stack([out, out * 2.0], axis=0)
        return T.tmean(out * out) + T.tsum(T.matmul(a, v))

    rep = finite_diff_check(loss, [a, b, v])
    assert rep.ok, rep


def test_maximum_minimum_where_grads():
    a = parameter(np.array([1.0, 3.0]))
    b = parameter(np.array([2.0, 2.0]))
    T.tsum(T.maximum(a, b)).backward()
    assert np.allclose(a.grad, [0.0, 1.0])
    assert np.allclose(b.grad, [1.0, 0.0])
    a.zero_grad(); b.zero_grad()
    T.tsum(T.where(np.array([True, False]), a, b)).backward()
    assert np.allclose(a.grad, [1.0, 0.0])
    assert np.allclose(b.grad, [0.0, 1.0])


def test_clip_gradient_zero_outside():
    x = parameter(np.array([-2.0, 0.5, 2.0]))
    T.tsum(T.clip(x, 0.0, 1.0)).backward()
    assert np.allclose(x.grad, [0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 5, 2))
    k = np.zeros((3, 3, 2, 2))
    k[1, 1, 0, 0] = 1.0
    k[1, 1, 1, 1] = 1.0
    out = conv2d(x, k)
    assert np.allclose(out.data, x)


def test_conv2d_box_kernel_interior():
    x = np.arange(25, dtype=float).reshape(5, 5, 1)
    k = np.ones((3, 3, 1, 1)) / 9.0
    out = conv2d(x, k, padding="zero")
    # interior pixel (2,2): mean of its 3x3 neighbourhood
    assert np.allclose(out.data[2, 2, 0], x[1:4, 1:4, 0].mean())


def test_conv2d_is_linear():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(8, 8, 3))
    y = rng.normal(size=(8, 8, 3))
    k = rng.normal(size=(3, 3, 3, 4))
    lhs = conv2d(2.5 * x - 1.25 * y, k).data
    rhs = 2.5 * conv2d(x, k).data - 1.25 * conv2d(y, k).data
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_conv2d_validates_shapes():
    x = np.zeros((5, 5, 2))
    with pytest.raises(ValueError):
        conv2d(x, np.zeros((2, 2, 2, 1)))   # even kernel
    with pytest.raises(ValueError):
        conv2d(x, np.zeros((3, 3, 3, 1)))   # channel mismatch
    with pytest.raises(ValueError):
        conv2d(x, np.zeros((3, 3, 2, 1)), padding="wrap")


@pytest.mark.parametrize("padding", ["reflect", "clamp", "zero"])
@pytest.mark.parametrize("seed", range(5))
def test_conv2d_gradcheck(padding, seed):
    rng = np.random.default_rng(10 + seed)
    x = parameter(rng.normal(size=(5, 6, 2)))
    k = parameter(rng.normal(size=(3, 3, 2, 3)) * 0.3)
    rep = finite_diff_check(
        lambda: T.tmean(conv2d(x, k, padding=padding) ** 2), [x, k])
    assert rep.ok, (padding, rep)


def test_conv2d_batched_matches_loop():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 6, 6, 2))
    k = rng.normal(size=(3, 3, 2, 4))
    out = conv2d(x, k).data
    for i in range(3):
        assert np.allclose(out[i], conv2d(x[i], k).data)


def test_conv2d_batched_gradcheck():
    rng = np.random.default_rng(6)
    x = parameter(rng.normal(size=(2, 5, 5, 2)))
    k = parameter(rng.normal(size=(3, 3, 2, 2)) * 0.3)
    rep = finite_diff_check(lambda: T.tmean(conv2d(x, k) ** 2), [x, k])
    assert rep.ok, rep


# ---------------------------------------------------------------------------
# bilinear_sample


def test_bilinear_identity_grid():
    rng = np.random.default_rng(7)
    src = rng.normal(size=(4, 5, 3))
    uu, vv = np.meshgrid(np.arange(5.0), np.arange(4.0))
    coords = np.stack([uu, vv], axis=-1)
    out, mask = bilinear_sample(src, coords)
    assert np.allclose(out.data, src)
    assert mask.all()


def test_bilinear_linear_midpoint():
    src = np.zeros((1, 2, 1))
    src[0, 0, 0] = 2.0
    src[0, 1, 0] = 4.0
    out, mask = bilinear_sample(src, np.array([[[0.5, 0.0]]]))
    assert np.allclose(out.data, 3.0)
    assert mask.all()


def test_bilinear_out_of_range_clamps_and_flags():
    src = np.arange(6.0).reshape(2, 3, 1)
    out, mask = bilinear_sample(src, np.array([[[-1.0, 0.0]]]))
    assert np.allclose(out.data, src[0, 0, 0])
    assert not mask.any()


def test_bilinear_rejects_nonfinite_coords():
    src = np.zeros((2, 2, 1))
    with pytest.raises(ValueError):
        bilinear_sample(src, np.array([[[np.nan, 0.0]]]))


@pytest.mark.parametrize("seed", range(5))
def test_bilinear_gradcheck(seed):
    rng = np.random.default_rng(20 + seed)
    src = parameter(rng.normal(size=(5, 6, 2)))
    # keep coordinates strictly interior: the clamp is non-differentiable
    coords = parameter(rng.uniform(0.6, 3.9, (4, 4, 2)))

    def loss():
        out, _ = bilinear_sample(src, coords)
        return T.tmean(out * out)

    rep = finite_diff_check(loss, [src, coords])
    assert rep.ok, rep


def test_bilinear_clamped_coord_gradient_is_zero():
    src = parameter(np.arange(4.0).reshape(2, 2, 1))
    coords = parameter(np.array([[[-0.5, 0.5]]]))
    out, _ = bilinear_sample(src, coords)
    T.tsum(out).backward()
    assert coords.grad[0, 0, 0] == 0.0   # x clamped
    assert coords.grad[0, 0, 1] != 0.0   # y interior


# ---------------------------------------------------------------------------
# pooling / upsampling


def test_avg_pool_and_upsample():
    x = np.arange(16.0).reshape(4, 4, 1)
    p = avg_pool2(x)
    assert p.shape == (2, 2, 1)
    assert np.allclose(p.data[0, 0, 0], x[:2, :2, 0].mean())
    u = upsample2(x)
    assert u.shape == (8, 8, 1)
    assert np.allclose(u.data[0, 0], u.data[1, 1])
    with pytest.raises(ValueError):
        avg_pool2(np.zeros((3, 4, 1)))


def test_pool_upsample_gradcheck():
    rng = np.random.default_rng(8)
    x = parameter(rng.normal(size=(4, 6, 2)))
    rep = finite_diff_check(
        lambda: T.tmean(upsample2(avg_pool2(x)) ** 2), [x])
    assert rep.ok, rep

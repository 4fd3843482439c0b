"""Scale-Shift GRU refinement: gate algebra, identity start, attention
head, and the two-iteration update rule."""

import numpy as np
import pytest

from depthgeo import ssg as S
from depthgeo import tensor as T
from depthgeo.tensor import Tensor, finite_diff_check, parameter


IN_CH = 8
HID = 8


def _params(seed=0, perturb=0.0):
    rng = np.random.default_rng(seed)
    p = S.SSGParams.init(rng, in_channels=IN_CH, hidden=HID, attn_dim=8,
                         mlp_width=8)
    if perturb:
        for t in p.parameters():
            t.data += rng.normal(0, perturb, t.shape)
    return p


def _inputs(seed=0, n=6):
    rng = np.random.default_rng(100 + seed)
    d = rng.uniform(-0.9, 0.9, (n, n))
    z = rng.uniform(-1.0, 1.0, (n, n, IN_CH))
    return d, z


# ---------------------------------------------------------------------------
# GRU gate algebra (exact identities via saturated gates)


def test_gate_update_zero_keeps_hidden():
    p = _params(perturb=0.05)
    p.b_z.data[:] = -1e4  # z == 0 exactly
    rng = np.random.default_rng(1)
    h = rng.normal(size=(5, 5, HID))
    x = rng.normal(size=(5, 5, IN_CH + 1))
    out = S.gru_cell(h, x, p)
    assert np.array_equal(out.data, h)


def test_gate_update_one_replaces_hidden():
    p = _params(perturb=0.05)
    p.b_z.data[:] = 1e4  # z == 1 exactly
    rng = np.random.default_rng(2)
    h = rng.normal(size=(5, 5, HID))
    x = rng.normal(size=(5, 5, IN_CH + 1))
    out = S.gru_cell(h, x, p)
    # h' == tanh(conv([r*h, x])): recompute the candidate directly
    r = T.sigmoid(T.conv2d(np.concatenate([h, x], axis=-1), p.w_r) + p.b_r)
    cand = T.tanh(T.conv2d(np.concatenate([r.data * h, x], axis=-1), p.w_h)
                  + p.b_h)
    assert np.array_equal(out.data, cand.data)


def test_gate_reset_zero_forgets_hidden():
    p = _params(perturb=0.05)
    p.b_r.data[:] = -1e4  # r == 0: the candidate sees no history
    p.b_z.data[:] = 1e4   # and fully replaces h
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 5, IN_CH + 1))
    h_a = rng.normal(size=(5, 5, HID))
    h_b = rng.normal(size=(5, 5, HID))
    out_a = S.gru_cell(h_a, x, p)
    out_b = S.gru_cell(h_b, x, p)
    assert np.array_equal(out_a.data, out_b.data)


def test_gru_cell_shape_check():
    p = _params()
    with pytest.raises(ValueError):
        S.gru_cell(np.zeros((4, 4, HID)), np.zeros((5, 5, IN_CH + 1)), p)


@pytest.mark.parametrize("seed", range(5))
def test_gru_cell_gradcheck(seed):
    p = _params(seed, perturb=0.05)
    rng = np.random.default_rng(200 + seed)
    h = parameter(rng.normal(size=(4, 4, HID)) * 0.5)
    x = rng.normal(size=(4, 4, IN_CH + 1))
    rep = finite_diff_check(
        lambda: T.tmean(S.gru_cell(h, x, p) ** 2), [h] + p.parameters())
    assert rep.ok, rep


# ---------------------------------------------------------------------------
# SST attention head


def test_sst_identity_at_init():
    p = _params()  # zeroed output MLP layers
    h = np.random.default_rng(4).normal(size=(6, 6, HID))
    s_c, s_h = S.sst(h, p)
    assert float(s_c.data) == 1.0
    assert float(s_h.data) == 0.0


def test_sst_scale_positive_and_bounded():
    p = _params(perturb=1.0)  # large perturbation to push the MLPs around
    rng = np.random.default_rng(5)
    for _ in range(10):
        h = rng.normal(size=(6, 6, HID)) * 3.0
        s_c, _ = S.sst(h, p)
        assert np.exp(-3.0) <= float(s_c.data) <= np.exp(3.0)


def test_sst_attention_normalization():
    # softmax rows sum to one: pooling a constant value field returns it
    p = _params(perturb=0.05)
    h = np.random.default_rng(6).normal(size=(5, 5, HID))
    flat = h.reshape(25, HID)
    keys = flat @ p.w_key.data
    q = np.stack([p.q_sc.data, p.q_sh.data])
    logits = q @ keys.T / np.sqrt(p.attn_dim)
    attn = np.exp(logits - logits.max(axis=-1, keepdims=True))
    attn /= attn.sum(axis=-1, keepdims=True)
    assert np.allclose(attn.sum(axis=-1), 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_sst_gradcheck(seed):
    p = _params(seed, perturb=0.05)
    rng = np.random.default_rng(300 + seed)
    h = parameter(rng.normal(size=(5, 5, HID)))

    def loss():
        s_c, s_h = S.sst(h, p)
        return s_c + s_h * s_h

    rep = finite_diff_check(loss, [h] + p.parameters())
    assert rep.ok, rep


# ---------------------------------------------------------------------------
# refinement


def test_refine_identity_at_init():
    p = _params()
    d, z = _inputs()
    d0, d1, d2 = S.ssg_refine(d, z, p)
    assert np.array_equal(d0.data, d1.data)
    assert np.array_equal(d1.data, d2.data)


def test_lift_depth_affine_endpoints():
    out = S.lift_depth(np.array([[-1.0, 0.0, 1.0]]), d_min=0.1, d_max=100.0)
    assert np.allclose(out.data, [[0.1, 50.05, 100.0]])


def test_refine_returns_three_stages():
    p = _params(perturb=0.05)
    d, z = _inputs()
    outs = S.ssg_refine(d, z, p)
    assert len(outs) == 3
    assert all(o.shape == d.shape for o in outs)
    assert all((o.data >= S.DEPTH_FLOOR).all() for o in outs)


def test_step_arithmetic_example():
    """Force D_delta = 1, s_c = 2, s_h = 3 and check 1 + 2*D + 3."""
    p = _params()
    p.b_depth.data[:] = 1.0
    # tanh(pre) must hit ln(2)/3: set the output bias directly
    p.mlp_sc[3].data[:] = np.arctanh(np.log(2.0) / 3.0)
    p.mlp_sh[3].data[:] = 3.0
    d_k = Tensor(np.full((4, 4), 0.5))
    h = Tensor(np.zeros((4, 4, HID)))
    state = S.SSGState(h=h, d_k=d_k, k=0)
    nxt = S.ssg_step(state, np.zeros((4, 4, IN_CH)), p)
    # h' stays finite; D_delta uses the zeroed conv + bias 1
    assert np.allclose(nxt.d_k.data, 1.0 + 2.0 * 0.5 + 3.0, atol=1e-9)


def test_step_count_is_fixed():
    p = _params()
    d, z = _inputs()
    d0 = S.lift_depth(d)
    state = S.SSGState(h=T.tanh(Tensor(z[..., :HID])), d_k=d0, k=0)
    state = S.ssg_step(state, z, p)
    state = S.ssg_step(state, z, p)
    with pytest.raises(ValueError):
        S.ssg_step(state, z, p)
    with pytest.raises(ValueError):
        S.SSGState(h=d0, d_k=d0, k=5)


def test_refine_without_sst_is_additive():
    p = _params(perturb=0.05)
    d, z = _inputs()
    d0, d1, _ = S.ssg_refine(d, z, p, use_sst=False)
    # D_1 - D_0 must equal the depth-head output alone (s_c=1, s_h=0)
    x = T.concat([Tensor(z), d0.reshape(*d0.shape, 1)], axis=-1)
    h1 = S.gru_cell(T.tanh(Tensor(z[..., :HID])), x, p)
    delta = S.depth_delta(h1, p)
    assert np.allclose(d1.data, np.maximum(delta.data + d0.data,
                                           S.DEPTH_FLOOR), atol=1e-12)


def test_refine_needs_enough_channels():
    p = _params()
    with pytest.raises(ValueError):
        S.ssg_refine(np.zeros((4, 4)), np.zeros((4, 4, HID - 1)), p)


def test_batched_matches_per_sample():
    p = _params(perturb=0.05)
    rng = np.random.default_rng(7)
    d = rng.uniform(-0.9, 0.9, (3, 6, 6))
    z = rng.uniform(-1, 1, (3, 6, 6, IN_CH))
    batched = S.ssg_refine_batched(d, z, p)
    for i in range(3):
        single = S.ssg_refine(d[i], z[i], p)
        for b, s in zip(batched, single):
            assert np.allclose(b.data[i], s.data, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_refine_gradcheck(seed):
    p = _params(seed, perturb=0.05)
    d, z = _inputs(seed)
    dn = parameter(d)
    rng = np.random.default_rng(400 + seed)
    gt = rng.uniform(1.0, 8.0, d.shape)

    # O(1) loss scaling: finite-difference truncation grows with magnitude
    def loss():
        out = S.ssg_refine(dn, z, p, d_max=10.0)[2]
        return 0.01 * T.tmean((out - gt) ** 2)

    rep = finite_diff_check(loss, [dn] + p.parameters(), eps=1e-4)
    assert rep.ok, rep


def test_refine_gradient_reaches_input_depth():
    p = _params(perturb=0.05)
    d, z = _inputs(3)
    dn = parameter(d)
    out = S.ssg_refine(dn, z, p)[2]
    T.tmean(out).backward()
    assert dn.grad is not None
    assert np.abs(dn.grad).max() > 0.0

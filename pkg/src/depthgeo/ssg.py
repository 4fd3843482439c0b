"""Scale-Shift GRU: recurrent refinement that moves a normalized depth map
toward a consistently-scaled one.

A convolutional GRU ingests the current depth with backbone features; a
small cross-attention head reads two learned queries against the hidden
state and emits a per-map scale s_c > 0 and shift s_h; the update is

    D_{k+1} = D_delta + s_c * D_k + s_h

run for exactly two iterations. The attention/depth heads are zero-
initialized so the whole block starts as the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor, conv2d, parameter

N_ITERS = 2
DEPTH_FLOOR = 1e-6


def _conv_init(rng, kh, kw, cin, cout, gain=1.0):
    std = gain / np.sqrt(kh * kw * cin)
    return rng.normal(0.0, std, (kh, kw, cin, cout))


@dataclass
class SSGParams:
    """All learnable state of the refinement block.

    Gate convolutions are 1x1 (pointwise mixing is enough for the gates);
    the candidate state uses a 3x3 kernel so spatial context enters once
    per iteration. Attention operates on the spatially flattened hidden
    state with a single head.
    """
    w_z: Tensor
    b_z: Tensor
    w_r: Tensor
    b_r: Tensor
    w_h: Tensor
    b_h: Tensor
    q_sc: Tensor
    q_sh: Tensor
    w_key: Tensor
    w_val: Tensor
    mlp_sc: tuple  # (W1, b1, W2, b2); W2/b2 zero at init
    mlp_sh: tuple
    w_depth: Tensor  # 3x3 conv to one channel, zero at init
    b_depth: Tensor
    hidden: int = 16
    attn_dim: int = 16

    @staticmethod
    def init(rng, in_channels: int, hidden: int = 16, attn_dim: int = 16,
             mlp_width: int = 16) -> "SSGParams":
        """Random gates/attention, zeroed output heads (identity start)."""
        cat = hidden + in_channels + 1  # +1 for the depth channel
        p = parameter

        def mlp():
            return (p(rng.normal(0, 1 / np.sqrt(attn_dim), (attn_dim, mlp_width))),
                    p(np.zeros(mlp_width)),
                    p(np.zeros((mlp_width, 1))),
                    p(np.zeros(1)))

        return SSGParams(
            w_z=p(_conv_init(rng, 1, 1, cat, hidden)), b_z=p(np.zeros(hidden)),
            w_r=p(_conv_init(rng, 1, 1, cat, hidden)), b_r=p(np.zeros(hidden)),
            w_h=p(_conv_init(rng, 3, 3, cat, hidden)), b_h=p(np.zeros(hidden)),
            q_sc=p(rng.normal(0, 1, attn_dim)),
            q_sh=p(rng.normal(0, 1, attn_dim)),
            w_key=p(rng.normal(0, 1 / np.sqrt(hidden), (hidden, attn_dim))),
            w_val=p(rng.normal(0, 1 / np.sqrt(hidden), (hidden, attn_dim))),
            mlp_sc=mlp(), mlp_sh=mlp(),
            w_depth=p(np.zeros((3, 3, hidden, 1))), b_depth=p(np.zeros(1)),
            hidden=hidden, attn_dim=attn_dim)

    def named_parameters(self) -> dict:
        out = {"w_z": self.w_z, "b_z": self.b_z, "w_r": self.w_r,
               "b_r": self.b_r, "w_h": self.w_h, "b_h": self.b_h,
               "q_sc": self.q_sc, "q_sh": self.q_sh,
               "w_key": self.w_key, "w_val": self.w_val,
               "w_depth": self.w_depth, "b_depth": self.b_depth}
        for tag, mlp in (("sc", self.mlp_sc), ("sh", self.mlp_sh)):
            for nm, t in zip(("w1", "b1", "w2", "b2"), mlp):
                out[f"mlp_{tag}.{nm}"] = t
        return out

    def parameters(self):
        return list(self.named_parameters().values())


@dataclass
class SSGState:
    h: Tensor
    d_k: Tensor
    k: int = 0

    def __post_init__(self):
        if not (0 <= self.k <= N_ITERS):
            raise ValueError(f"iteration index {self.k} out of range")


def gru_cell(h, x, params: SSGParams) -> Tensor:
    """One gated update of the hidden map.

    z = sigma(conv([h, x]; W_z))      update gate
    r = sigma(conv([h, x]; W_r))      reset gate
    hcand = tanh(conv([r*h, x]; W_h))
    h' = (1 - z) * h + z * hcand
    """
    h = as_tensor(h)
    x = as_tensor(x)
    if h.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"spatial shapes differ: {h.shape} vs {x.shape}")
    hx = T.concat([h, x], axis=-1)
    z = T.sigmoid(conv2d(hx, params.w_z) + params.b_z)
    r = T.sigmoid(conv2d(hx, params.w_r) + params.b_r)
    cand_in = T.concat([r * h, x], axis=-1)
    h_cand = T.tanh(conv2d(cand_in, params.w_h) + params.b_h)
    return (1.0 - z) * h + z * h_cand


def _mlp2(x, layers):
    w1, b1, w2, b2 = layers
    return T.matmul(T.tanh(T.matmul(x, w1) + b1), w2) + b2


def sst(h, params: SSGParams):
    """Scale-Shift Transformer head: two queries cross-attend over the
    flattened hidden state and emit (s_c, s_h) per map.

    s_c goes through exp of a tanh-bounded pre-activation (range
    [e^-3, e^3]) so the scale stays positive; s_h is unconstrained.
    Zero-initialized output layers give exactly (1, 0).
    """
    h = as_tensor(h)
    hh, ww, c = h.shape
    flat = h.reshape(hh * ww, c)
    keys = T.matmul(flat, params.w_key)      # (HW, d)
    vals = T.matmul(flat, params.w_val)
    q = T.stack([params.q_sc, params.q_sh], axis=0)  # (2, d)
    logits = T.matmul(q, T.transpose(keys)) * (1.0 / np.sqrt(params.attn_dim))
    attn = T.softmax(logits, axis=-1)        # rows sum to 1
    pooled = T.matmul(attn, vals)            # (2, d)
    sc_pre = _mlp2(pooled[0:1], params.mlp_sc).reshape()
    sh = _mlp2(pooled[1:2], params.mlp_sh).reshape()
    s_c = T.exp(3.0 * T.tanh(sc_pre))
    return s_c, sh


def depth_delta(h, params: SSGParams) -> Tensor:
    d = conv2d(as_tensor(h), params.w_depth) + params.b_depth
    return d.reshape(d.shape[0], d.shape[1])


def ssg_step(state: SSGState, z_img, params: SSGParams,
             use_sst: bool = True) -> SSGState:
    """One refinement iteration: D_{k+1} = D_delta + s_c D_k + s_h.

    use_sst=False pins (s_c, s_h) = (1, 0), reducing to the plain
    additive update D_{k+1} = D_delta + D_k.
    """
    if state.k >= N_ITERS:
        raise ValueError(f"refinement is fixed at {N_ITERS} iterations")
    z_img = as_tensor(z_img)
    x = T.concat([z_img, state.d_k.reshape(*state.d_k.shape, 1)], axis=-1)
    h_next = gru_cell(state.h, x, params)
    if use_sst:
        s_c, s_h = sst(h_next, params)
    else:
        s_c, s_h = Tensor(1.0), Tensor(0.0)
    d_next = depth_delta(h_next, params) + s_c * state.d_k + s_h
    d_next = T.maximum(d_next, DEPTH_FLOOR)
    return SSGState(h=h_next, d_k=d_next, k=state.k + 1)


def lift_depth(raw, d_min: float = 0.1, d_max: float = 100.0) -> Tensor:
    """Affine map from the backbone's [-1, 1] range to positive depth."""
    raw = as_tensor(raw)
    d = d_min + (raw + 1.0) * (0.5 * (d_max - d_min))
    return T.maximum(d, DEPTH_FLOOR)


def ssg_refine(d_ssi, z_img, params: SSGParams, use_sst: bool = True,
               d_min: float = 0.1, d_max: float = 100.0):
    """Lift a normalized depth map and run both refinement iterations.

    Returns (D_0, D_1, D_2): the lifted initialization and both refined
    stages, all kept for loss attachment. Identity-initialized params
    return D_2 == D_1 == D_0 exactly.
    """
    d_ssi = as_tensor(d_ssi)
    z_img = as_tensor(z_img)
    d0 = lift_depth(d_ssi, d_min, d_max)
    h0 = T.tanh(z_img[..., :params.hidden]) if z_img.shape[-1] >= params.hidden \
        else None
    if h0 is None:
        raise ValueError(f"feature map needs >= {params.hidden} channels to "
                         "seed the hidden state")
    state = SSGState(h=h0, d_k=d0, k=0)
    outs = [d0]
    for _ in range(N_ITERS):
        state = ssg_step(state, z_img, params, use_sst=use_sst)
        outs.append(state.d_k)
    return tuple(outs)


def ssg_refine_batched(d_ssi, z_img, params: SSGParams, use_sst: bool = True,
                       d_min: float = 0.1, d_max: float = 100.0):
    """ssg_refine over a batch: d_ssi (N, H, W), z_img (N, H, W, C).

    Convolutions run batched; the attention head still pools each map
    separately, so per-map (s_c, s_h) match the unbatched path exactly.
    """
    d_ssi = as_tensor(d_ssi)
    z_img = as_tensor(z_img)
    n = d_ssi.shape[0]
    d_k = lift_depth(d_ssi, d_min, d_max)
    if z_img.shape[-1] < params.hidden:
        raise ValueError(f"feature map needs >= {params.hidden} channels to "
                         "seed the hidden state")
    h = T.tanh(z_img[..., :params.hidden])
    outs = [d_k]
    for _ in range(N_ITERS):
        x = T.concat([z_img, d_k.reshape(*d_k.shape, 1)], axis=-1)
        h = gru_cell(h, x, params)
        delta = depth_delta_batched(h, params)
        if use_sst:
            scs, shs = [], []
            for i in range(n):
                s_c, s_h = sst(h[i], params)
                scs.append(s_c)
                shs.append(s_h)
            sc_b = T.stack(scs).reshape(n, 1, 1)
            sh_b = T.stack(shs).reshape(n, 1, 1)
            d_k = delta + sc_b * d_k + sh_b
        else:
            d_k = delta + d_k
        d_k = T.maximum(d_k, DEPTH_FLOOR)
        outs.append(d_k)
    return tuple(outs)


def depth_delta_batched(h, params: SSGParams) -> Tensor:
    d = conv2d(as_tensor(h), params.w_depth) + params.b_depth
    return d.reshape(d.shape[:-1])

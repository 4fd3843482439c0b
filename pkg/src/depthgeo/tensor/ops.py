"""Structured array operations: 2-D convolution, bilinear sampling, pooling.

conv2d and bilinear_sample carry hand-derived backward passes (the generic
tape would be too slow / too memory hungry for them); correctness is pinned
by finite-difference checks in the test suite.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, _add_grad, as_tensor, tmean, reshape, mul

_PAD_MODES = {"reflect": "reflect", "clamp": "edge", "zero": "constant"}

# (H, W, ph, pw, mode) -> flat source-index map of the padded image
_pad_index_cache: dict = {}


def _pad_index_map(h: int, w: int, ph: int, pw: int, mode: str):
    """Border bookkeeping for folding padded-frame gradients back onto the
    source image: (border rows, border cols, flat source index per cell)."""
    key = (h, w, ph, pw, mode)
    m = _pad_index_cache.get(key)
    if m is None:
        base = np.arange(h * w, dtype=np.int64).reshape(h, w)
        padded = np.pad(base, ((ph, ph), (pw, pw)), mode=_PAD_MODES[mode])
        border = np.ones(padded.shape, dtype=bool)
        border[ph:ph + h, pw:pw + w] = False
        br, bc = np.nonzero(border)
        m = (br, bc, padded[br, bc])
        _pad_index_cache[key] = m
    return m


def conv2d(x, kernel, padding: str = "reflect") -> Tensor:
    """Same-size 2-D convolution (cross-correlation) over the last channel axis.

    x: (H, W, C) or (N, H, W, C); kernel: (kh, kw, C, Co), kh/kw odd.
    padding selects the border rule: reflect, clamp or zero.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if padding not in _PAD_MODES:
        raise ValueError(f"unknown padding mode {padding!r}")
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be (kh, kw, Cin, Cout), got shape {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial size must be odd, got {kh}x{kw}")
    if x.ndim not in (3, 4):
        raise ValueError(f"input must be (H, W, C) or (N, H, W, C), got shape {x.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, h, w, c = xd.shape
    if c != cin:
        raise ValueError(f"input has {c} channels but kernel expects {cin}")

    ph, pw = kh // 2, kw // 2
    if padding == "zero":
        xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    else:
        xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)), mode=_PAD_MODES[padding])

    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))       # (N,H,W,C,kh,kw)
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)) \
        .reshape(n * h * w, kh * kw * c)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out_data = (patches @ kmat).reshape(n, h, w, cout)
    if not batched:
        out_data = out_data[0]

    def backward(g):
        gd = g if batched else g[None]
        gflat = gd.reshape(n * h * w, cout)
        if kernel.requires_grad:
            gk = (patches.T @ gflat).reshape(kh, kw, cin, cout)
            _add_grad(kernel, gk)
        if x.requires_grad:
            # full correlation of the output gradient with the flipped kernel
            gp = np.pad(gd, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2))
            gpatches = np.ascontiguousarray(gwin.transpose(0, 1, 2, 4, 5, 3)) \
                .reshape(n * (h + 2 * ph) * (w + 2 * pw), kh * kw * cout)
            kflip = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2) \
                .reshape(kh * kw * cout, cin)
            gxp = (gpatches @ kflip).reshape(n, h + 2 * ph, w + 2 * pw, cin)
            gx = gxp[:, ph:ph + h, pw:pw + w, :]
            if padding != "zero":
                # interior cells map one-to-one; only the border frame of
                # the padded gradient has to be folded back in
                br, bc, src = _pad_index_map(h, w, ph, pw, padding)
                acc = np.ascontiguousarray(gx.transpose(1, 2, 0, 3)) \
                    .reshape(h * w, n, cin)
                np.add.at(acc, src, gxp[:, br, bc, :].transpose(1, 0, 2))
                gx = acc.reshape(h, w, n, cin).transpose(2, 0, 1, 3)
            _add_grad(x, np.ascontiguousarray(gx) if batched else gx[0])

    return Tensor(out_data, parents=(x, kernel), backward=backward)


def bilinear_sample(src, coords, border: str = "clamp"):
    """Sample src at fractional pixel coordinates with bilinear weights.

    src: (H, W, C) or (N, H, W, C); coords: (..., 2) with matching batching,
    coords[..., 0] = x (column), coords[..., 1] = y (row); integer coordinates
    land exactly on source pixels. Out-of-range coordinates are clamped to the
    border and flagged False in the returned validity mask.

    Returns (values, mask) where mask is a boolean ndarray (off-tape).
    """
    if border != "clamp":
        raise ValueError(f"unsupported border mode {border!r}")
    src = as_tensor(src)
    coords = as_tensor(coords)
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("sampling coordinates must be finite")
    batched = src.ndim == 4
    sd = src.data if batched else src.data[None]
    n, h, w, c = sd.shape
    cd = coords.data if batched else coords.data[None]
    if cd.shape[0] != n or cd.shape[-1] != 2:
        raise ValueError(f"coords shape {coords.shape} does not match source {src.shape}")

    xr = cd[..., 0]
    yr = cd[..., 1]
    mask = (xr >= 0.0) & (xr <= w - 1) & (yr >= 0.0) & (yr <= h - 1)

    xc = np.clip(xr, 0.0, w - 1.0)
    yc = np.clip(yr, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.int64) if w > 1 else np.zeros_like(xc, np.int64)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.int64) if h > 1 else np.zeros_like(yc, np.int64)
    wx = xc - x0
    wy = yc - y0

    bofs = (np.arange(n, dtype=np.int64) * (h * w)).reshape((n,) + (1,) * (cd.ndim - 2))
    i00 = bofs + y0 * w + x0
    i01 = i00 + (1 if w > 1 else 0)
    i10 = i00 + (w if h > 1 else 0)
    i11 = i10 + (1 if w > 1 else 0)

    flat = sd.reshape(n * h * w, c)
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    wxe = wx[..., None]
    wye = wy[..., None]
    out_data = ((1 - wye) * ((1 - wxe) * v00 + wxe * v01)
                + wye * ((1 - wxe) * v10 + wxe * v11))
    if not batched:
        out_data = out_data[0]
        mask = mask[0]

    # zero coordinate-gradient where the clamp is active
    x_free = (xr > 0.0) & (xr < w - 1)
    y_free = (yr > 0.0) & (yr < h - 1)

    def backward(g):
        gd = g if batched else g[None]
        if src.requires_grad:
            acc = np.zeros((n * h * w, c))
            np.add.at(acc, i00.reshape(-1), ((1 - wye) * (1 - wxe) * gd).reshape(-1, c))
            np.add.at(acc, i01.reshape(-1), ((1 - wye) * wxe * gd).reshape(-1, c))
            np.add.at(acc, i10.reshape(-1), (wye * (1 - wxe) * gd).reshape(-1, c))
            np.add.at(acc, i11.reshape(-1), (wye * wxe * gd).reshape(-1, c))
            gs = acc.reshape(n, h, w, c)
            _add_grad(src, gs if batched else gs[0])
        if coords.requires_grad:
            dvdx = ((1 - wye) * (v01 - v00) + wye * (v11 - v10))
            dvdy = ((1 - wxe) * (v10 - v00) + wxe * (v11 - v01))
            gx = (gd * dvdx).sum(axis=-1) * x_free
            gy = (gd * dvdy).sum(axis=-1) * y_free
            gc = np.stack([gx, gy], axis=-1)
            _add_grad(coords, gc if batched else gc[0])

    values = Tensor(out_data, parents=(src, coords), backward=backward)
    return values, mask


def avg_pool2(x) -> Tensor:
    """2x2 average pooling; spatial dims must be even."""
    x = as_tensor(x)
    batched = x.ndim == 4
    shape = x.shape if batched else (1,) + x.shape
    n, h, w, c = shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    y = reshape(x, (n, h // 2, 2, w // 2, 2, c))
    y = tmean(y, axis=(2, 4))
    return y if batched else reshape(y, (h // 2, w // 2, c))


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    batched = x.ndim == 4
    shape = x.shape if batched else (1,) + x.shape
    n, h, w, c = shape
    y = reshape(x, (n, h, 1, w, 1, c))
    y = mul(y, np.ones((1, 1, 2, 1, 2, 1)))
    y = reshape(y, (n, 2 * h, 2 * w, c))
    return y if batched else reshape(y, (2 * h, 2 * w, c))

"""Supervision terms: photometric (SSIM + L1), edge-aware smoothness and its
ground-contact-weighted variant, edge/sky/teacher losses, BerHu, and the
total-loss combination. Everything that trains is tensor-native and passes
finite-difference checks; teacher-side preprocessing is plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import DepthMap
from .tensor import Tensor, as_tensor

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class LossWeights:
    """Loss-term weights; defaults follow the training recipe."""

    eta_p1: float = 0.85
    eta_p2: float = 0.15
    eta_a: float = 8e-3
    eta_t1: float = 0.6
    eta_t2: float = 0.9
    eta_sky: float = 0.1
    gamma_gds: float = 100.0
    lambda_filter: float = 1.5
    step_now: int = 0
    step_max: int = 1

    def __post_init__(self):
        for name in ("eta_p1", "eta_p2", "eta_a", "eta_t1", "eta_t2",
                     "eta_sky", "gamma_gds", "lambda_filter"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.step_now <= self.step_max):
            raise ValueError("need 0 <= step_now <= step_max")


@dataclass
class SegMasks:
    """Boolean segmentation masks: dynamic objects and sky."""

    dynamic: np.ndarray
    sky: np.ndarray

    def __post_init__(self):
        self.dynamic = np.asarray(self.dynamic, dtype=bool)
        self.sky = np.asarray(self.sky, dtype=bool)
        if self.dynamic.shape != self.sky.shape:
            raise ValueError("dynamic and sky masks must share a shape")


def eta_step(step_now: int, step_max: int) -> float:
    """Annealing divisor for teacher supervision: max(1, 30 * progress)."""
    return max(1.0, 30.0 * (step_now / step_max))


# -- photometric -------------------------------------------------------------

def _box3(x) -> Tensor:
    """3x3 box mean filter per channel, reflect padding."""
    c = x.shape[-1]
    k = np.zeros((3, 3, c, c))
    for i in range(c):
        k[:, :, i, i] = 1.0 / 9.0
    return T.conv2d(x, k, padding="reflect")


def ssim(a, b) -> Tensor:
    """Per-pixel SSIM (channel-averaged), 3x3 box windows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.data.min() < -1e-9 or a.data.max() > 1 + 1e-9 \
            or b.data.min() < -1e-9 or b.data.max() > 1 + 1e-9:
        raise ValueError("ssim expects intensities in [0, 1]")
    mu_a = _box3(a)
    mu_b = _box3(b)
    var_a = _box3(a * a) - mu_a * mu_a
    var_b = _box3(b * b) - mu_b * mu_b
    cov = _box3(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return T.tmean(num / den, axis=-1)


def _photometric_map(target: Tensor, warped: Tensor, w: LossWeights) -> Tensor:
    s = ssim(target, warped)
    l1 = T.tmean(T.absolute(target - warped), axis=-1)
    return w.eta_p1 * (1.0 - s) * 0.5 + w.eta_p2 * l1


def photometric_loss(target, warped, weights: LossWeights | None = None,
                     reduce: str = "mean", mask: np.ndarray | None = None):
    """SSIM/L1 reprojection loss.

    warped may be one image or a list of candidate reconstructions; with a
    list the per-pixel minimum over candidates is taken before reduction.
    reduce: "mean" for a scalar, "per-pixel" for the loss map. An optional
    boolean mask restricts the mean to valid pixels.
    """
    w = weights or LossWeights()
    target = as_tensor(target)
    sources = warped if isinstance(warped, (list, tuple)) else [warped]
    if not sources:
        raise ValueError("need at least one warped source image")
    pm = _photometric_map(target, as_tensor(sources[0]), w)
    for s in sources[1:]:
        pm = T.minimum(pm, _photometric_map(target, as_tensor(s), w))
    if reduce == "per-pixel":
        return pm
    if reduce != "mean":
        raise ValueError(f"unknown reduction {reduce!r}")
    if mask is None:
        return T.tmean(pm)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return Tensor(0.0)
    return T.tsum(pm * mask.astype(np.float64)) / n


# -- smoothness family -------------------------------------------------------

def _to_gray(image: Tensor, depth_ndim: int) -> Tensor:
    return T.tmean(image, axis=-1) if image.ndim == depth_ndim + 1 else image


def _image_gradient_weights(gray: Tensor):
    """exp(-|forward difference|) of the grayscale image, per axis."""
    gx = T.absolute(gray[..., :, 1:] - gray[..., :, :-1])
    gy = T.absolute(gray[..., 1:, :] - gray[..., :-1, :])
    return T.exp(-gx), T.exp(-gy)


def _smoothness_terms(depth, image):
    d = as_tensor(depth)
    img = _to_gray(as_tensor(image), d.ndim)
    if (d.data.mean(axis=(-2, -1)) == 0.0).any():
        raise ValueError("depth with zero mean cannot be normalized")
    dn = d / T.tmean(d, axis=(-2, -1), keepdims=True)
    dx = T.absolute(dn[..., :, 1:] - dn[..., :, :-1])
    dy = T.absolute(dn[..., 1:, :] - dn[..., :-1, :])
    if img.shape != d.shape:
        raise ValueError(f"image spatial shape {img.shape} does not match "
                         f"depth {d.shape}")
    wx, wy = _image_gradient_weights(img)
    return dx * wx, dy * wy


def smoothness_loss(depth, image) -> Tensor:
    """Edge-aware smoothness on mean-normalized depth, forward differences."""
    tx, ty = _smoothness_terms(depth, image)
    return T.tmean(tx) + T.tmean(ty)


def gds_loss(depth, image, masks: SegMasks, weights: LossWeights | None = None) -> Tensor:
    """Smoothness with the vertical term up-weighted on dynamic pixels."""
    w = weights or LossWeights()
    tx, ty = _smoothness_terms(depth, image)
    dyn = masks.dynamic.astype(np.float64)
    if dyn.shape != as_tensor(depth).shape:
        raise ValueError("dynamic mask shape does not match depth")
    m_gr = w.gamma_gds * dyn + (1.0 - dyn)
    return T.tmean(tx) + T.tmean(ty * m_gr[..., :-1, :])


# -- edge loss ---------------------------------------------------------------

def gradnet(x):
    """Absolute Sobel responses (Gx, Gy), same size, reflect padding."""
    x = as_tensor(x)
    xe = x.reshape(x.shape + (1,))
    gx = T.absolute(T.conv2d(xe, SOBEL_X[:, :, None, None], padding="reflect"))
    gy = T.absolute(T.conv2d(xe, SOBEL_Y[:, :, None, None], padding="reflect"))
    return gx.reshape(x.shape), gy.reshape(x.shape)


def edge_loss(teacher_depth, student_depth) -> Tensor:
    """L1 between edge maps of the (detached, mean-normalized) teacher depth
    and the mean-normalized student depth."""
    t = as_tensor(teacher_depth).detach()
    s = as_tensor(student_depth)
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {s.shape}")
    tn = t * (1.0 / t.data.mean(axis=(-2, -1), keepdims=True))
    sn = s / T.tmean(s, axis=(-2, -1), keepdims=True)
    cx, cy = gradnet(tn)
    dx, dy = gradnet(sn)
    return T.tmean(T.absolute(cx - dx)) + T.tmean(T.absolute(cy - dy))


# -- sky loss ----------------------------------------------------------------

def sky_loss(depth, masks: SegMasks, d_max: float,
             weights: LossWeights | None = None) -> Tensor:
    """Pull sky pixels toward the maximum depth; zero if the mask is empty."""
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    w = weights or LossWeights()
    d = as_tensor(depth)
    sky = masks.sky
    n = int(sky.sum())
    if n == 0:
        return Tensor(0.0)
    diff = T.absolute(d - d_max) * sky.astype(np.float64)
    return w.eta_sky * T.tsum(diff) / n


# -- teacher supervision -----------------------------------------------------

def berhu(x, y, mask: np.ndarray | None = None) -> Tensor:
    """Reversed Huber: L1 below c, scaled L2 above, c = 0.2 max|x - y|.

    c depends on the inputs and is differentiated through; the piecewise
    form keeps value and slope continuous across |e| = c. x == y exactly
    gives 0 (degenerate c = 0).
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return Tensor(0.0)
        x = x[mask]
        y = y[mask]
    e = x - y
    abs_e = T.absolute(e)
    c = 0.2 * T.tmax(abs_e)
    cv = float(c.data)
    if cv == 0.0:
        return Tensor(0.0)
    small = abs_e.data <= cv
    vals = T.where(small, abs_e, (e * e + c * c) / (2.0 * c))
    return T.tmean(vals)


def disparity_to_depth(dp, d_min: float = 0.1, d_max: float = 100.0) -> DepthMap:
    """Teacher disparity in [0, 1] to depth via clipped inverse-depth."""
    dp = np.asarray(dp, dtype=np.float64)
    if dp.min() < 0.0 or dp.max() > 1.0:
        raise ValueError("disparity must lie in [0, 1]")
    inv = np.clip(1.0 / d_max + (1.0 / d_min - 1.0 / d_max) * dp, 0.0, 3.0)
    return DepthMap(1.0 / inv)


def teacher_norm(d_tc) -> np.ndarray:
    """Min/max normalization of the teacher depth to exactly [-1, 1]."""
    d = np.asarray(d_tc.values if isinstance(d_tc, DepthMap) else d_tc,
                   dtype=np.float64)
    lo, hi = d.min(), d.max()
    if hi == lo:
        raise ValueError("constant teacher depth cannot be normalized")
    return 2.0 * ((d - lo) / (hi - lo) - 0.5)


def _photometric_map_np(target: np.ndarray, warped: np.ndarray,
                        w: LossWeights) -> np.ndarray:
    """Plain-array twin of _photometric_map (same 3x3 box windows and
    reflect border); used where no gradient is ever needed."""
    import scipy.ndimage

    def box(x):
        return scipy.ndimage.uniform_filter(
            x, size=(1,) * (x.ndim - 3) + (3, 3, 1), mode="mirror")

    mu_a, mu_b = box(target), box(warped)
    var_a = box(target * target) - mu_a * mu_a
    var_b = box(warped * warped) - mu_b * mu_b
    cov = box(target * warped) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    s = (num / den).mean(axis=-1)
    l1 = np.abs(target - warped).mean(axis=-1)
    return w.eta_p1 * (1.0 - s) * 0.5 + w.eta_p2 * l1


def teacher_filter_mask(target, warped_by_teacher, weights: LossWeights) -> np.ndarray:
    """Adaptive teacher confidence mask.

    True where the per-pixel photometric error of the teacher-depth warp
    (min over source frames) beats lambda_filter / eta_step; the threshold
    shrinks from 1.5 to 0.05 over training. Pure array computation: the
    teacher path never needs gradients.
    """
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target)
    sources = warped_by_teacher \
        if isinstance(warped_by_teacher, (list, tuple)) else [warped_by_teacher]
    if not sources:
        raise ValueError("need at least one warped source image")
    pm = _photometric_map_np(tgt, np.asarray(sources[0]), weights)
    for s in sources[1:]:
        pm = np.minimum(pm, _photometric_map_np(tgt, np.asarray(s), weights))
    thr = weights.lambda_filter / eta_step(weights.step_now, weights.step_max)
    return pm < thr


def teacher_loss(d_tc, d_ssi, d_1, d_si, mask: np.ndarray,
                 weights: LossWeights) -> Tensor:
    """Three-stage pseudo-label supervision, annealed by 1 / eta_step.

    d_tc is the teacher depth (constant), d_ssi the raw bounded prediction
    supervised against the min/max-normalized teacher, d_1 the intermediate
    refinement, d_si the final depth supervised only on mask-true pixels.
    """
    d_tc_arr = np.asarray(d_tc.values if isinstance(d_tc, DepthMap) else d_tc,
                          dtype=np.float64)
    term0 = berhu(teacher_norm(d_tc_arr), d_ssi)
    term1 = berhu(d_tc_arr, d_1)
    term2 = berhu(d_tc_arr, d_si, mask=mask)
    scale = 1.0 / eta_step(weights.step_now, weights.step_max)
    return (term0 + weights.eta_t1 * term1 + weights.eta_t2 * term2) * scale


# -- surrogate task ----------------------------------------------------------

def surrogate_loss_photometric(target, recon, weights: LossWeights | None = None) -> Tensor:
    """Image-space reconstruction supervision (structure over color)."""
    return photometric_loss(target, recon, weights, reduce="mean")


def surrogate_loss_latent(f_target, f_pred) -> Tensor:
    """Mean squared error in feature space."""
    a, b = as_tensor(f_target), as_tensor(f_pred)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return T.tmean(d * d)


# -- total -------------------------------------------------------------------

@dataclass
class LossParts:
    surrogate: Tensor | float = 0.0
    photometric: Tensor | float = 0.0
    teacher: Tensor | float = 0.0
    gds: Tensor | float = 0.0
    sky: Tensor | float = 0.0
    edge: Tensor | float = 0.0


def total_loss(parts: LossParts, weights: LossWeights | None = None) -> Tensor:
    """L = L_s + L_ph + L_tc + eta_a * (L_GDS + L_sky + L_e)."""
    w = weights or LossWeights()
    aux = as_tensor(parts.gds) + as_tensor(parts.sky) + as_tensor(parts.edge)
    return (as_tensor(parts.surrogate) + as_tensor(parts.photometric)
            + as_tensor(parts.teacher) + w.eta_a * aux)

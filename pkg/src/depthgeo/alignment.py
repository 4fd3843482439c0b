"""Depth de-normalization and evaluation.

Predictions live on an arbitrary affine scale; before metric evaluation they
are mapped to the ground-truth range by one of three strategies: none
(trust the prediction as metric), median (ratio of medians, shift 0), or
lsq (closed-form least-squares affine fit). Metrics are the usual
AbsRel / SqRel / RMSE / RMSElog / delta-accuracy set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DepthMap

VALID_MIN = 1e-3
VALID_MAX = 80.0


@dataclass(frozen=True)
class AffineAlignment:
    scale: float
    shift: float
    method: str = "none"  # none | median | lsq
    degenerate: bool = False

    def __post_init__(self):
        if self.method not in ("none", "median", "lsq"):
            raise ValueError(f"unknown alignment method {self.method!r}")
        if not (np.isfinite(self.scale) and np.isfinite(self.shift)):
            raise ValueError("alignment parameters must be finite")
        if self.method == "median" and self.shift != 0.0:
            raise ValueError("median alignment is scale-only")


@dataclass(frozen=True)
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float
    n_valid: int

    def __post_init__(self):
        if not (0.0 <= self.a1 <= self.a2 <= self.a3 <= 1.0):
            raise ValueError("accuracy fractions must be ordered in [0, 1]")
        for e in (self.abs_rel, self.sq_rel, self.rmse, self.rmse_log):
            if e < 0:
                raise ValueError("error metrics must be nonnegative")

    FIELDS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3",
              "n_valid")

    def as_row(self):
        return [getattr(self, f) for f in self.FIELDS]


def _values(d) -> np.ndarray:
    if isinstance(d, DepthMap):
        return d.values
    return np.asarray(d, dtype=np.float64)


def normalize_ssi(depth) -> np.ndarray:
    """Map a depth map to roughly [-1, 1] using its own 2nd/98th percentiles.

    y = ((D - q2) / (q98 - q2) - 0.5) * 2. The 2% tails land outside
    [-1, 1] and are left unclipped. Invariant to positive affine maps of D.
    """
    d = _values(depth)
    q2, q98 = np.percentile(d, [2.0, 98.0])
    if q98 == q2:
        raise ValueError("degenerate depth map: 2nd and 98th percentiles equal")
    return ((d - q2) / (q98 - q2) - 0.5) * 2.0


def _masked(pred, gt, mask):
    p = _values(pred)
    g = _values(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if mask is None:
        mask = np.ones(p.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty validity mask")
    return p[mask], g[mask]


def median_align(pred, gt, mask=None) -> AffineAlignment:
    """Scale-only alignment by the ratio of medians (robust to outliers)."""
    p, g = _masked(pred, gt, mask)
    mp = float(np.median(p))
    if mp == 0.0:
        raise ValueError("prediction median is zero")
    return AffineAlignment(float(np.median(g)) / mp, 0.0, "median")


def lsq_align(pred, gt, mask=None) -> AffineAlignment:
    """Affine alignment minimizing sum of squared depth differences.

    Closed-form 2x2 normal equations. A constant prediction makes the
    system singular; we fall back to scale 1 / mean shift and flag it.
    """
    p, g = _masked(pred, gt, mask)
    if p.size < 2:
        raise ValueError("need at least 2 valid pixels")
    n = p.size
    sp, sg = p.sum(), g.sum()
    spp, spg = (p * p).sum(), (p * g).sum()
    det = n * spp - sp * sp
    if det <= 1e-12 * max(n * spp, 1.0):
        return AffineAlignment(1.0, float((g - p).mean()), "lsq",
                               degenerate=True)
    s = (n * spg - sp * sg) / det
    t = (sg * spp - sp * spg) / det
    return AffineAlignment(float(s), float(t), "lsq")


def apply_alignment(pred, a: AffineAlignment):
    """D_eval = s * D_pred + t, clamped to stay a valid (positive) DepthMap.

    Returns (DepthMap, n_clamped) where n_clamped counts pixels pushed up
    to the 1e-6 floor.
    """
    p = _values(pred)
    if a.method == "none":
        mapped = p.copy()
    else:
        mapped = a.scale * p + a.shift
    n_clamped = int((mapped < 1e-6).sum())
    return DepthMap(np.maximum(mapped, 1e-6)), n_clamped


def eval_metrics(pred_aligned, gt, valid_min: float = VALID_MIN,
                 valid_max: float = VALID_MAX) -> MetricReport:
    """Standard depth metrics over the gt validity window."""
    p = _values(pred_aligned)
    g = _values(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    mask = (g > valid_min) & (g < valid_max)
    if not mask.any():
        raise ValueError("no ground-truth pixels in the valid range")
    p = np.maximum(p[mask], 1e-6)
    g = g[mask]

    err = p - g
    abs_rel = float(np.mean(np.abs(err) / g))
    sq_rel = float(np.mean(err * err / g))
    rmse = float(np.sqrt(np.mean(err * err)))
    log_err = np.log(p) - np.log(g)
    rmse_log = float(np.sqrt(np.mean(log_err * log_err)))
    ratio = np.maximum(p / g, g / p)
    a1 = float(np.mean(ratio < 1.25))
    a2 = float(np.mean(ratio < 1.25 ** 2))
    a3 = float(np.mean(ratio < 1.25 ** 3))
    return MetricReport(abs_rel, sq_rel, rmse, rmse_log, a1, a2, a3,
                        int(mask.sum()))


def evaluate(pred, gt, method: str = "none", mask=None) -> MetricReport:
    """Align a prediction to gt by the named strategy, then score it."""
    if method == "none":
        a = AffineAlignment(1.0, 0.0, "none")
    elif method == "median":
        a = median_align(pred, gt, mask)
    elif method == "lsq":
        a = lsq_align(pred, gt, mask)
    else:
        raise ValueError(f"unknown alignment method {method!r}")
    aligned, _ = apply_alignment(pred, a)
    return eval_metrics(aligned, gt)

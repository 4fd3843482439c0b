"""The training loop: mixed-batch sampling, the per-step loss assembly
(photometric + surrogate + teacher + auxiliary), the three-phase freezing
schedule, and validation under both alignment strategies.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from .. import tensor as T
from ..alignment import eval_metrics, lsq_align, median_align, apply_alignment
from ..fileio import save_checkpoint
from ..geometry import CameraModel, RigidPose, relative_pose, warp_frame
from ..losses import (LossParts, LossWeights, SegMasks, berhu, gds_loss,
                      edge_loss, photometric_loss, sky_loss,
                      surrogate_loss_latent, surrogate_loss_photometric,
                      teacher_filter_mask, teacher_loss, teacher_norm,
                      total_loss)
from ..ssg import SSGParams, ssg_refine, ssg_refine_batched
from ..synth import (generate_dataset, make_corridor_scene, non_occluded_mask,
                     render_view)
from ..tensor import Tensor, as_tensor
from .backbone import PoseHead, ToyBackbone, rodrigues
from .config import TrainConfig
from .optim import AdamW


def mix_batch(pool_a, pool_b, lam: float, batch: int, rng):
    """Draw `batch` items, each independently from pool_a with probability
    lam, else from pool_b. Returns [(item, "A"|"B"), ...]."""
    if not (0.0 <= lam <= 1.0):
        raise ValueError("mix rate must lie in [0, 1]")
    if len(pool_a) == 0 or len(pool_b) == 0:
        raise ValueError("both pools must be nonempty")
    out = []
    for _ in range(batch):
        if rng.random() < lam:
            out.append((pool_a[rng.integers(len(pool_a))], "A"))
        else:
            out.append((pool_b[rng.integers(len(pool_b))], "B"))
    return out


def degrade_to_teacher(gt: np.ndarray, rng) -> np.ndarray:
    """Oracle-degraded pseudo-label: smooth multiplicative noise plus edge
    blur. Coarse but stable, like a frozen off-the-shelf teacher."""
    h, w = gt.shape
    coarse = rng.normal(0.0, 1.0, (max(h // 8, 2), max(w // 8, 2)))
    noise = scipy.ndimage.zoom(coarse, (h / coarse.shape[0],
                                        w / coarse.shape[1]), order=1)
    noise = scipy.ndimage.gaussian_filter(noise, 3.0)
    noise = noise / (np.abs(noise).max() + 1e-12)
    d = gt * (1.0 + 0.06 * noise)
    d = scipy.ndimage.uniform_filter(d, size=3)
    return np.maximum(d, 1e-3)


@dataclass
class Sample:
    img_t: np.ndarray
    img_prev: np.ndarray
    img_next: np.ndarray
    gt: np.ndarray
    teacher: np.ndarray
    masks: SegMasks
    K: CameraModel


def build_samples(scenes, rng):
    """Pre-render every usable (scene, center frame) pair."""
    samples = []
    for sc in scenes:
        frames = [render_view(sc, i) for i in range(sc.n_frames())]
        for t in range(1, sc.n_frames() - 1):
            img_t, d_t, m = frames[t]
            samples.append(Sample(
                img_t=img_t, img_prev=frames[t - 1][0],
                img_next=frames[t + 1][0], gt=d_t.values,
                teacher=degrade_to_teacher(d_t.values, rng),
                masks=m, K=sc.K))
    return samples


@dataclass
class TrainState:
    backbone: ToyBackbone
    pose: PoseHead
    ssg: SSGParams
    opt: AdamW
    rng: np.random.Generator
    step: int = 0
    phase: int = 1
    incidents: int = 0
    loss_history: list = field(default_factory=list)
    aux_pool: list = field(default_factory=list)
    target_pool: list = field(default_factory=list)

    @staticmethod
    def init(config: TrainConfig) -> "TrainState":
        rng = np.random.default_rng(config.seed)
        backbone = ToyBackbone.init(rng)
        pose = PoseHead.init(rng)
        ssg = SSGParams.init(rng, in_channels=backbone.c1,
                             hidden=backbone.c1, attn_dim=backbone.c1)
        params = (backbone.parameters() + pose.parameters() + ssg.parameters())
        opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
        return TrainState(backbone=backbone, pose=pose, ssg=ssg, opt=opt,
                          rng=rng)

    def named_parameters(self) -> dict:
        out = {}
        out.update(self.backbone.named_parameters())
        out.update(self.pose.named_parameters())
        out.update({f"ssg.{k}": v for k, v in self.ssg.named_parameters().items()})
        return out

    def frozen_parameters(self):
        """Phase 2 decouples depth from pose/refinement optimization."""
        if self.phase == 2:
            return self.pose.parameters() + self.ssg.parameters()
        return []


def _advance_phase(state: TrainState, config: TrainConfig):
    if state.phase == 1 and state.step >= config.phase1_end():
        state.phase = 2
    elif state.phase == 2:
        w = config.plateau_window
        hist = state.loss_history
        plateau = False
        if len(hist) >= 2 * w:
            prev = float(np.mean(hist[-2 * w:-w]))
            cur = float(np.mean(hist[-w:]))
            plateau = prev - cur < config.plateau_tol * abs(prev)
        if plateau or state.step >= config.phase3_latest():
            state.phase = 3


def depth_stages(state: TrainState, raw, feat, config: TrainConfig,
                 batched: bool = False):
    """Depth pipeline: raw bounded output to (D_0, D_1, D_si).

    With the refinement module off, the raw output goes through the
    harness's sigmoid lift instead and all stages coincide.
    """
    if config.use_ssg:
        refine = ssg_refine_batched if batched else ssg_refine
        return refine(raw, feat, state.ssg,
                      d_min=config.d_min, d_max=config.d_max)
    d = config.d_max * T.sigmoid(2.0 * raw)
    return d, d, d


def _predicted_pose(rot_i, trans_i):
    """(R tensor, t tensor, RigidPose snapshot for off-tape warps)."""
    R = rodrigues(rot_i)
    snap = RigidPose(R.data.copy(), trans_i.data.copy())
    return R, trans_i, snap


def _warmup_step(state: TrainState, imgs_t, batch, config: TrainConfig):
    """Normalized-teacher pretraining of the backbone alone.

    Stands in for initializing from a pretrained scale/shift-invariant
    depth model: without it the metric supervision routed through the
    identity-initialized refiner turns the raw stage metric within a few
    hundred steps, and the refinement module is left with no affine error
    to remove."""
    out = state.backbone.forward(imgs_t, "depth")
    raw = out["out"]
    loss = as_tensor(0.0)
    for i, s in enumerate(batch):
        loss = loss + berhu(teacher_norm(s.teacher), raw[i])
    loss = loss / len(batch)
    breakdown = {
        "loss": float(loss.data), "ph": 0.0, "surrogate": 0.0,
        "teacher": float(loss.data), "gds": 0.0, "sky": 0.0, "edge": 0.0,
        "phase": state.phase,
    }
    if not np.isfinite(loss.data):
        state.incidents += 1
        state.step += 1
        return state, breakdown
    state.opt.zero_grad()
    loss.backward()
    state.opt.step(frozen=state.pose.parameters() + state.ssg.parameters())
    state.loss_history.append(float(loss.data))
    state.step += 1
    return state, breakdown


def train_step(state: TrainState, batch, config: TrainConfig):
    """One optimizer update over a batch of Samples.

    Returns (state, breakdown dict). A non-finite total loss aborts the
    update (parameters untouched) and counts as an incident.
    """
    _advance_phase(state, config)
    w = LossWeights(**{**config.loss.__dict__,
                       "step_now": state.step, "step_max": config.step_max})
    n = len(batch)
    imgs_t = np.stack([s.img_t for s in batch])

    if state.step < config.warmup_end():
        return _warmup_step(state, imgs_t, batch, config)

    out = state.backbone.forward(imgs_t, "depth")
    raw, feat = out["out"], out["features"]

    # pose for both neighbours in one batched pass
    pairs_b = np.concatenate([np.stack([s.img_prev for s in batch]),
                              np.stack([s.img_next for s in batch])])
    rot, trans = state.pose.forward(np.concatenate([imgs_t, imgs_t]), pairs_b)

    d0_b, d1_b, d2_b = depth_stages(state, raw, feat, config, batched=True)

    warped_prev, warped_next = [], []
    valid_prev, valid_next = [], []
    tw_prev, tw_next = [], []
    for i, s in enumerate(batch):
        for j, (src, acc_w, acc_v, acc_t) in enumerate((
                (s.img_prev, warped_prev, valid_prev, tw_prev),
                (s.img_next, warped_next, valid_next, tw_next))):
            R, t, snap = _predicted_pose(rot[j * n + i], trans[j * n + i])
            wimg, vmask = warp_frame(src, d2_b[i], None, s.K, R=R, t=t)
            acc_w.append(wimg); acc_v.append(vmask)
            # teacher-depth warp (constants only) for the confidence filter
            twimg, _ = warp_frame(src, s.teacher, snap, s.K)
            acc_t.append(twimg.data)

    wp_b = T.stack(warped_prev); wn_b = T.stack(warped_next)
    vp = np.stack(valid_prev); vn = np.stack(valid_next)

    if config.warp_sources == "both":
        sources, vmask = [wp_b, wn_b], vp | vn
    else:
        sources, vmask = [wn_b], vn
    l_ph = photometric_loss(imgs_t, sources, w, mask=vmask)

    # teacher supervision with the annealed confidence filter
    teacher_b = np.stack([s.teacher for s in batch])
    t_sources = [np.stack(tw_prev), np.stack(tw_next)] \
        if config.warp_sources == "both" else [np.stack(tw_next)]
    fmask = teacher_filter_mask(imgs_t, t_sources, w)
    l_tc = as_tensor(0.0)
    for i, s in enumerate(batch):
        l_tc = l_tc + teacher_loss(s.teacher, raw[i], d1_b[i], d2_b[i],
                                   fmask[i], w)
    l_tc = l_tc / n

    # auxiliary terms (batched)
    masks_b = SegMasks(dynamic=np.stack([s.masks.dynamic for s in batch]),
                       sky=np.stack([s.masks.sky for s in batch]))
    l_gds = gds_loss(d2_b, imgs_t, masks_b, w)
    l_sky = sky_loss(raw, masks_b, 1.0, w)  # raw range tops out at +1
    l_edge = edge_loss(d0_b, d1_b) + edge_loss(d0_b, d2_b)

    # surrogate reconstruction on the mixed batch
    if config.use_mir and config.surrogate != "off":
        drawn = mix_batch(state.aux_pool, state.target_pool,
                          config.lambda_mix, n, state.rng)
        imgs_m = np.stack([img for img, _ in drawn])
        recon = state.backbone.forward(imgs_m, "recon")["out"]
        if config.surrogate == "photometric":
            l_sur = surrogate_loss_photometric(imgs_m, recon, w)
        else:
            l_sur = surrogate_loss_latent(imgs_m, recon)
    else:
        l_sur = as_tensor(0.0)

    parts = LossParts(surrogate=l_sur, photometric=l_ph, teacher=l_tc,
                      gds=l_gds, sky=l_sky, edge=l_edge)
    loss = total_loss(parts, w)

    breakdown = {
        "loss": float(loss.data), "ph": float(as_tensor(l_ph).data),
        "surrogate": float(as_tensor(l_sur).data),
        "teacher": float(as_tensor(l_tc).data),
        "gds": float(as_tensor(l_gds).data),
        "sky": float(as_tensor(l_sky).data),
        "edge": float(as_tensor(l_edge).data),
        "phase": state.phase,
    }

    if not np.isfinite(loss.data):
        state.incidents += 1
        state.step += 1
        return state, breakdown

    state.opt.zero_grad()
    loss.backward()
    state.opt.step(frozen=state.frozen_parameters())
    state.loss_history.append(float(loss.data))
    state.step += 1
    return state, breakdown


def predict_depth(state: TrainState, img: np.ndarray, config: TrainConfig):
    """Inference pass: returns (d0, d1, d2) as plain arrays."""
    out = state.backbone.forward(img, "depth")
    stages = depth_stages(state, out["out"], out["features"], config)
    return tuple(s.data for s in stages)


def validate(state: TrainState, val_samples, config: TrainConfig):
    """Median- and LSQ-aligned metrics plus the per-stage LSQ shifts."""
    rows = []
    shifts0, shifts2 = [], []
    for s in val_samples:
        d0, _, d2 = predict_depth(state, s.img_t, config)
        valid = (s.gt > 1e-3) & (s.gt < 80.0)
        row = {}
        for method, fit in (("median", median_align), ("lsq", lsq_align)):
            a = fit(d2, s.gt, valid)
            aligned, _ = apply_alignment(d2, a)
            rep = eval_metrics(aligned, s.gt)
            row[method] = rep
        rows.append(row)
        shifts0.append(abs(lsq_align(d0, s.gt, valid).shift))
        shifts2.append(abs(lsq_align(d2, s.gt, valid).shift))
    summary = {
        "abs_rel_median": float(np.mean([r["median"].abs_rel for r in rows])),
        "abs_rel_lsq": float(np.mean([r["lsq"].abs_rel for r in rows])),
        "rmse_median": float(np.mean([r["median"].rmse for r in rows])),
        "rmse_lsq": float(np.mean([r["lsq"].rmse for r in rows])),
        "a1_median": float(np.mean([r["median"].a1 for r in rows])),
        "a1_lsq": float(np.mean([r["lsq"].a1 for r in rows])),
        "mean_abs_shift_d0": float(np.mean(shifts0)),
        "mean_abs_shift_d2": float(np.mean(shifts2)),
    }
    return summary


def run_training(config: TrainConfig, out_dir: str):
    """Full training run; writes train/validation CSVs and a checkpoint.

    Returns (state, final_validation_summary).
    """
    os.makedirs(out_dir, exist_ok=True)
    data_rng = np.random.default_rng(config.seed + 1_000_003)
    train_scenes = [make_corridor_scene(data_rng, size=config.image_size)
                    for _ in range(config.n_train_scenes)]
    aux_scenes = generate_dataset(config.seed + 77, config.n_aux_scenes,
                                  size=config.image_size)
    val_scenes = [make_corridor_scene(data_rng, size=config.image_size)
                  for _ in range(config.n_val_scenes)]

    train_samples = build_samples(train_scenes, data_rng)
    val_samples = build_samples(val_scenes, data_rng)
    aux_pool = []
    for sc in aux_scenes:
        for i in range(sc.n_frames()):
            aux_pool.append(render_view(sc, i)[0])
    target_pool = [s.img_t for s in train_samples]

    state = TrainState.init(config)
    state.aux_pool = aux_pool
    state.target_pool = target_pool

    train_csv = os.path.join(out_dir, "train_log.csv")
    val_csv = os.path.join(out_dir, "val_log.csv")
    summary = None
    with open(train_csv, "w", newline="") as ftr, \
            open(val_csv, "w", newline="") as fva:
        twr = vwr = None
        for _ in range(config.step_max):
            idx = state.rng.choice(len(train_samples), size=config.batch_size,
                                   replace=True)
            batch = [train_samples[i] for i in idx]
            state, breakdown = train_step(state, batch, config)
            row = {"step": state.step, **breakdown}
            if twr is None:
                twr = csv.DictWriter(ftr, fieldnames=list(row))
                twr.writeheader()
            twr.writerow(row)
            if state.step % config.val_interval == 0 \
                    or state.step == config.step_max:
                summary = validate(state, val_samples, config)
                vrow = {"step": state.step, **summary}
                if vwr is None:
                    vwr = csv.DictWriter(fva, fieldnames=list(vrow))
                    vwr.writeheader()
                vwr.writerow(vrow)
                fva.flush()
    if summary is None:
        summary = validate(state, val_samples, config)

    save_checkpoint(os.path.join(out_dir, "checkpoint.bin"),
                    state.named_parameters(),
                    meta={"step": str(state.step),
                          "incidents": str(state.incidents)})
    return state, summary

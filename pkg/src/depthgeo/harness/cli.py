"""Command-line surface.

Subcommands:
  train            run the training loop (config file + seed overrides)
  eval             align a prediction to ground truth and print metrics CSV
  warp             demo: synthesize a view by depth-based warping, write PGM
  verify-geometry  numeric scale/shift ambiguity report
  occlusion-demo   disparity-vs-photometric-cost sweep at an occluded pixel
  gradcheck        finite-difference audit of the differentiable surface

Exit codes: 0 success, 2 validation/usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    p = _Parser(prog="depthgeo")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the toy training loop")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--seed", type=int, help="override train.seed")
    t.add_argument("--steps", type=int, help="override train.step_max")
    t.add_argument("--out", default="runs/latest", help="output directory")

    e = sub.add_parser("eval", help="evaluate a depth prediction")
    e.add_argument("--pred", required=True, help="prediction PFM")
    e.add_argument("--gt", required=True, help="ground-truth PFM")
    e.add_argument("--align", default="none",
                   choices=["none", "median", "lsq"])

    w = sub.add_parser("warp", help="warp demo on a synthetic scene")
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", default="warp_demo.pgm")

    v = sub.add_parser("verify-geometry",
                       help="scale/shift ambiguity residuals")
    v.add_argument("--seed", type=int, default=0)

    o = sub.add_parser("occlusion-demo",
                       help="photometric cost sweep at an occluded pixel")
    o.add_argument("--out", default="occlusion_sweep.csv")

    g = sub.add_parser("gradcheck", help="finite-difference audit")
    g.add_argument("--seed", type=int, default=0)
    return p


def _cmd_train(args) -> int:
    from .config import TrainConfig, load_config
    from .train import run_training

    cfg = TrainConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    if args.steps is not None:
        from dataclasses import replace
        cfg = replace(cfg, step_max=args.steps)
    state, summary = run_training(cfg, args.out)
    if state.incidents:
        print(f"non-finite loss incidents: {state.incidents}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"done: step={state.step} "
          f"abs_rel_median={summary['abs_rel_median']:.4f} "
          f"abs_rel_lsq={summary['abs_rel_lsq']:.4f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from ..alignment import MetricReport, evaluate
    from ..fileio import read_pfm

    pred = read_pfm(args.pred)
    gt = read_pfm(args.gt)
    rep = evaluate(pred, gt, method=args.align)
    wr = csv.writer(sys.stdout)
    wr.writerow(MetricReport.FIELDS)
    wr.writerow(rep.as_row())
    return EXIT_OK


def _cmd_warp(args) -> int:
    from ..fileio import write_pnm
    from ..geometry import relative_pose, warp_frame
    from ..synth import make_corridor_scene, render_view

    rng = np.random.default_rng(args.seed)
    scene = make_corridor_scene(rng)
    img_t, d_t, _ = render_view(scene, 0)
    img_s, _, _ = render_view(scene, 1)
    pose = relative_pose(scene.poses[0], scene.poses[1])
    warped, valid = warp_frame(img_s, d_t.values, pose, scene.K)
    err = float(np.abs(warped.data - img_t)[valid].mean())
    write_pnm(args.out, warped.data)
    print(f"wrote {args.out}; mean abs intensity error on valid pixels: "
          f"{err:.4f}")
    return EXIT_OK if np.isfinite(err) else EXIT_NUMERIC


def _cmd_verify_geometry(args) -> int:
    from ..geometry import (DegenerateSceneError, scale_ambiguity_residual,
                            shift_ambiguity_residual)
    from ..synth import make_corridor_scene, render_view

    rng = np.random.default_rng(args.seed)
    scene = make_corridor_scene(rng)
    _, d, _ = render_view(scene, 0)
    from ..geometry import relative_pose
    pose = relative_pose(scene.poses[0], scene.poses[2])
    s_res = max(scale_ambiguity_residual(d.values, pose, scene.K, s)
                for s in (0.5, 2.0, 7.3))
    try:
        h_res = shift_ambiguity_residual(d.values, pose, scene.K, 1.0)
        shift_line = f"shift residual (s_h=1): {h_res:.4f} px"
    except DegenerateSceneError as exc:
        h_res = None
        shift_line = f"shift residual: {exc}"
    print(f"scale residual (worst of 3 scales): {s_res:.3e} px")
    print(shift_line)
    ok = s_res < 1e-9 and (h_res is None or h_res > 0.1)
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_occlusion(args) -> int:
    from ..synth import occlusion_probe

    info = occlusion_probe()
    with open(args.out, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["disparity_px", "photometric_cost"])
        for d, c in zip(info["disparities"], info["costs"]):
            wr.writerow([int(d), f"{c:.6f}"])
    print(f"true disparity: {info['true_disparity']:.0f} px; "
          f"occluder: {info['occluder_disparity']:.0f} px; "
          f"photometric argmin: {info['argmin_disparity']} px "
          f"(sweep written to {args.out})")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from ..tensor import finite_diff_check, parameter, tmean
    from .. import tensor as T
    from .. import losses as L
    from .. import ssg as S
    from .backbone import PoseHead, ToyBackbone, rodrigues

    rng = np.random.default_rng(args.seed)
    failures = []

    def check(name, loss_fn, params, eps=1e-5):
        rep = finite_diff_check(loss_fn, params, eps=eps)
        status = "ok" if rep.ok else "FAIL"
        print(f"  {name:<24} {status}  max rel err {rep.max_rel_err:.2e}")
        if not rep.ok:
            failures.append(name)

    img = rng.uniform(0, 1, (8, 8, 3))
    d = parameter(rng.uniform(1, 5, (8, 8)))
    w = parameter(rng.uniform(0.1, 1, (8, 8, 3)))
    check("photometric", lambda: L.photometric_loss(img, w), [w])
    check("smoothness", lambda: L.smoothness_loss(d, img), [d])
    check("berhu", lambda: L.berhu(d, img[..., 0] * 5.0), [d])
    check("edge", lambda: L.edge_loss(img[..., 0] * 5.0 + 1.0, d), [d])

    p = S.SSGParams.init(rng, in_channels=4, hidden=4, attn_dim=4,
                         mlp_width=4)
    for t in p.parameters():
        t.data += rng.normal(0, 0.05, t.shape)
    dn = parameter(rng.uniform(-0.9, 0.9, (6, 6)))
    z = rng.uniform(-1, 1, (6, 6, 4))
    gt = rng.uniform(1, 8, (6, 6))
    # deep composites get a larger step: weakly-excited weights have
    # gradients small enough that roundoff dominates central differences
    # at the default eps
    check("ssg_refine",
          lambda: 0.01 * tmean((S.ssg_refine(dn, z, p, d_max=10.0)[2] - gt) ** 2),
          [dn] + p.parameters(), eps=1e-4)

    bb = ToyBackbone.init(rng, c1=4, c2=4)
    im = rng.uniform(0, 1, (8, 8, 3))
    check("backbone",
          lambda: tmean(bb.forward(im, "depth")["out"] ** 2),
          bb.parameters(), eps=1e-4)

    ph = PoseHead.init(rng, ch=4)
    i1 = rng.uniform(0, 1, (16, 16, 3))
    i2 = rng.uniform(0, 1, (16, 16, 3))

    def pose_loss():
        rot, tr = ph.forward(i1, i2)
        R = rodrigues(rot)
        return tmean(R * R) + tmean(tr * tr)
    check("pose_head", pose_loss, ph.parameters(), eps=1e-4)

    if failures:
        print(f"FAILED: {', '.join(failures)}")
        return EXIT_NUMERIC
    print("all gradient checks passed")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "warp": _cmd_warp,
    "verify-geometry": _cmd_verify_geometry,
    "occlusion-demo": _cmd_occlusion,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())

"""Procedural ground-truth oracle: textured plane scenes with exact depth.

Scenes are collections of textured rectangles (planes with finite extents)
watched by a moving pinhole camera. Depth comes from analytic ray-plane
intersection, so ground truth carries no discretization error; textures are
band-limited random fields so photometric matching has a clean sub-pixel
minimum. A dedicated three-layer scene reproduces the classic occlusion
pathology of reprojection supervision: at an occluded pixel the
photometrically optimal disparity is the occluder's, not the true one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, DepthMap, RigidPose, relative_pose
from .losses import SegMasks, photometric_loss
from .tensor import bilinear_sample

SKY_DEPTH = 100.0
DEPTH_EPS = 1e-9


def band_limited_texture(rng, size: int = 128, n_waves: int = 6,
                         contrast: float = 0.35):
    """RGB texture from a handful of random sinusoids, values in [0, 1].

    Low frequency content only: white noise would alias under bilinear
    resampling and break the sub-pixel photometric minimum.
    """
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    base = np.full((size, size), 0.5)
    for _ in range(n_waves):
        f = rng.uniform(0.5, 4.0) / size
        ang = rng.uniform(0, 2 * np.pi)
        ph = rng.uniform(0, 2 * np.pi)
        amp = contrast * rng.uniform(0.2, 1.0) / n_waves * 2.0
        base = base + amp * np.sin(2 * np.pi * f * (np.cos(ang) * ii + np.sin(ang) * jj) + ph)
    tint = rng.uniform(0.85, 1.15, 3)
    tex = np.clip(base[..., None] * tint, 0.0, 1.0)
    return tex


@dataclass
class ScenePlane:
    """Textured rectangle: point + orthonormal in-plane frame + extents.

    extent_a / extent_b are (lo, hi) in scene units along e1 / e2; None
    means unbounded (backdrop). label is one of static/dynamic/sky.
    """
    p0: np.ndarray
    normal: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    texture: np.ndarray
    extent_a: tuple | None = None
    extent_b: tuple | None = None
    label: str = "static"
    tex_window: tuple = (-10.0, 10.0)  # world span mapped onto the texture

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.normal = self.normal / np.linalg.norm(self.normal)
        self.e1 = np.asarray(self.e1, dtype=np.float64)
        self.e2 = np.asarray(self.e2, dtype=np.float64)
        if self.label not in ("static", "dynamic", "sky"):
            raise ValueError(f"unknown label {self.label!r}")

    @staticmethod
    def fronto(z: float, x_range, y_range, texture, label="static",
               tex_window=(-10.0, 10.0)) -> "ScenePlane":
        """Fronto-parallel rectangle at world depth z (camera at origin
        looking +z in the world frame)."""
        return ScenePlane(p0=np.array([0.0, 0.0, z]),
                          normal=np.array([0.0, 0.0, -1.0]),
                          e1=np.array([1.0, 0.0, 0.0]),
                          e2=np.array([0.0, 1.0, 0.0]),
                          texture=texture, extent_a=x_range, extent_b=y_range,
                          label=label, tex_window=tex_window)


@dataclass
class SyntheticScene:
    planes: list
    K: CameraModel
    poses: list  # world_from_camera per frame

    def n_frames(self) -> int:
        return len(self.poses)


def _sample_texture(plane: ScenePlane, a, b):
    """Look up plane-local coordinates in the texture grid (bilinear, the
    same kernel the differentiable sampler uses; border clamped)."""
    th, tw = plane.texture.shape[:2]
    lo, hi = plane.tex_window
    u = (a - lo) / (hi - lo) * (tw - 1)
    v = (b - lo) / (hi - lo) * (th - 1)
    coords = np.stack([u, v], axis=-1).reshape(1, -1, 2)
    out, _ = bilinear_sample(plane.texture, coords)
    return out.data.reshape(len(a), 3)


def _raycast(scene: SyntheticScene, origin: np.ndarray, dirs: np.ndarray):
    """Closest-hit ray cast. dirs is (N, 3) in world coordinates with unit
    z-component in the camera frame (so the hit parameter t IS the camera
    depth). Returns (depth, color, label_index) with sky fallback."""
    n = dirs.shape[0]
    depth = np.full(n, SKY_DEPTH)
    color = np.zeros((n, 3))
    plane_idx = np.full(n, -1)

    for idx, pl in enumerate(scene.planes):
        denom = dirs @ pl.normal
        num = (pl.p0 - origin) @ pl.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        hit = (t > 0.5) & (t < depth - DEPTH_EPS)
        if not hit.any():
            continue
        pts = origin + t[hit, None] * dirs[hit]
        rel = pts - pl.p0
        a = rel @ pl.e1
        b = rel @ pl.e2
        inside = np.ones(a.shape, dtype=bool)
        if pl.extent_a is not None:
            inside &= (a >= pl.extent_a[0]) & (a <= pl.extent_a[1])
        if pl.extent_b is not None:
            inside &= (b >= pl.extent_b[0]) & (b <= pl.extent_b[1])
        if not inside.any():
            continue
        sel = np.flatnonzero(hit)[inside]
        depth[sel] = t[sel]
        plane_idx[sel] = idx
        color[sel] = _sample_texture(pl, a[inside], b[inside])

    sky = plane_idx < 0
    if sky.any():
        color[sky] = _sky_color(scene, dirs[sky])
    return depth, color, plane_idx


def _sky_color(scene: SyntheticScene, dirs):
    # deterministic gentle gradient so sky pixels are not degenerate for SSIM
    d = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    shade = 0.75 + 0.15 * d[:, 1] + 0.05 * d[:, 0]
    return np.stack([0.9 * shade, 0.95 * shade, shade], axis=-1)


def _pixel_dirs(K: CameraModel, pose: RigidPose, coords=None):
    """World-frame ray directions with unit camera-z for given pixel
    coordinates (defaults to the full grid)."""
    if coords is None:
        dirs_cam = K.ray_directions().reshape(-1, 3)
    else:
        c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        dirs_cam = np.stack([(c[:, 0] - K.cx) / K.fx,
                             (c[:, 1] - K.cy) / K.fy,
                             np.ones(len(c))], axis=-1)
    return dirs_cam @ pose.R.T


def render_view(scene: SyntheticScene, frame: int):
    """Render one frame: (image (H,W,3) in [0,1], DepthMap, SegMasks)."""
    if not (0 <= frame < scene.n_frames()):
        raise ValueError(f"frame {frame} out of range")
    K = scene.K
    pose = scene.poses[frame]
    dirs = _pixel_dirs(K, pose)
    depth, color, plane_idx = _raycast(scene, pose.T, dirs)

    labels = np.array([pl.label for pl in scene.planes])
    sky = plane_idx < 0
    dyn = np.zeros(plane_idx.shape, dtype=bool)
    hitp = plane_idx >= 0
    if hitp.any():
        dyn[hitp] = labels[plane_idx[hitp]] == "dynamic"
        sky[hitp] |= labels[plane_idx[hitp]] == "sky"
    shape = (K.height, K.width)
    return (color.reshape(K.height, K.width, 3),
            DepthMap(depth.reshape(shape)),
            SegMasks(dynamic=dyn.reshape(shape), sky=sky.reshape(shape)))


def depth_along(scene: SyntheticScene, frame: int, coords) -> np.ndarray:
    """Ray-cast depth at arbitrary (possibly fractional) pixel coordinates."""
    pose = scene.poses[frame]
    dirs = _pixel_dirs(scene.K, pose, coords)
    depth, _, _ = _raycast(scene, pose.T, dirs)
    return depth.reshape(np.asarray(coords).shape[:-1])


def non_occluded_mask(scene: SyntheticScene, frame_tgt: int,
                      frame_src: int, tol: float = 1e-3) -> np.ndarray:
    """True where a target pixel's surface point is directly visible in the
    source view (and lands inside the source frame)."""
    K = scene.K
    _, d_t, _ = render_view(scene, frame_tgt)
    pose = relative_pose(scene.poses[frame_tgt], scene.poses[frame_src])
    rays = K.ray_directions()
    pts = rays * d_t.values[..., None]
    q = pts.reshape(-1, 3) @ pose.R.T + pose.T
    z = q[:, 2]
    front = z > 1e-6
    zc = np.maximum(z, 1e-6)
    u = K.fx * q[:, 0] / zc + K.cx
    v = K.fy * q[:, 1] / zc + K.cy
    inframe = (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
    coords = np.stack([u, v], axis=-1)
    d_src = depth_along(scene, frame_src, coords)
    visible = d_src >= z - tol * np.maximum(z, 1.0)
    return (front & inframe & visible).reshape(K.height, K.width)


# -- scene families ----------------------------------------------------------

def _default_camera(size: int = 64) -> CameraModel:
    f = float(size)
    c = (size - 1) / 2.0
    return CameraModel(fx=f, fy=f, cx=c, cy=c, width=size, height=size)


def make_corridor_scene(rng, size: int = 64, n_frames: int = 3) -> SyntheticScene:
    """Four walls and an end cap seen by a camera stepping forward."""
    K = _default_camera(size)
    hw = rng.uniform(1.6, 2.4)    # half width
    hh = rng.uniform(1.4, 2.0)    # half height
    far = rng.uniform(20.0, 35.0)
    span = (0.0, far)
    tex = lambda: band_limited_texture(rng)
    win = (-2.0, far + 2.0)
    planes = [
        ScenePlane(p0=[-hw, 0, 0], normal=[1, 0, 0], e1=[0, 0, 1],
                   e2=[0, 1, 0], texture=tex(), extent_a=span,
                   extent_b=(-hh, hh), tex_window=win),
        ScenePlane(p0=[hw, 0, 0], normal=[-1, 0, 0], e1=[0, 0, 1],
                   e2=[0, 1, 0], texture=tex(), extent_a=span,
                   extent_b=(-hh, hh), tex_window=win),
        ScenePlane(p0=[0, hh, 0], normal=[0, -1, 0], e1=[0, 0, 1],
                   e2=[1, 0, 0], texture=tex(), extent_a=span,
                   extent_b=(-hw, hw), tex_window=win),
        ScenePlane(p0=[0, -hh, 0], normal=[0, 1, 0], e1=[0, 0, 1],
                   e2=[1, 0, 0], texture=tex(), extent_a=span,
                   extent_b=(-hw, hw), tex_window=win),
        ScenePlane.fronto(far, None, None, tex(), tex_window=(-4.0, 4.0)),
    ]
    step = rng.uniform(0.15, 0.35)
    poses = []
    for i in range(n_frames):
        yaw = rng.uniform(-0.01, 0.01)
        poses.append(RigidPose.from_axis_angle([0.0, yaw, 0.0],
                                               [0.0, 0.0, step * i]))
    return SyntheticScene(planes=planes, K=K, poses=poses)


def make_fronto_scene(rng, size: int = 64, n_frames: int = 3,
                      with_dynamic: bool = False) -> SyntheticScene:
    """Two or three fronto-parallel cards in front of a far backdrop."""
    K = _default_camera(size)
    far = rng.uniform(25.0, 45.0)
    planes = [ScenePlane.fronto(far, None, None, band_limited_texture(rng),
                                tex_window=(-far / 2, far / 2))]
    n_cards = rng.integers(2, 4)
    for i in range(n_cards):
        z = rng.uniform(4.0, 15.0)
        w = rng.uniform(0.1, 0.35) * z
        cx = rng.uniform(-0.25, 0.25) * z
        cy = rng.uniform(-0.25, 0.25) * z
        label = "dynamic" if (with_dynamic and i == 0) else "static"
        planes.append(ScenePlane.fronto(
            z, (cx - w, cx + w), (cy - w, cy + w), band_limited_texture(rng),
            label=label, tex_window=(-z, z)))
    step = rng.uniform(0.1, 0.3)
    poses = [RigidPose.from_axis_angle(
        rng.uniform(-0.008, 0.008, 3),
        [step * i * rng.choice([-1.0, 1.0]), 0.0, 0.05 * i])
        for i in range(n_frames)]
    return SyntheticScene(planes=planes, K=K, poses=poses)


def make_slanted_scene(rng, size: int = 64, n_frames: int = 3) -> SyntheticScene:
    """Ground-like slanted plane plus a tilted card and a backdrop."""
    K = _default_camera(size)
    far = rng.uniform(30.0, 50.0)
    planes = [ScenePlane.fronto(far, None, None, band_limited_texture(rng),
                                tex_window=(-far / 2, far / 2))]
    # slanted card: rotate a fronto plane about a random in-plane axis
    z = rng.uniform(6.0, 14.0)
    tilt = rng.uniform(0.2, 0.6) * rng.choice([-1.0, 1.0])
    c, s = np.cos(tilt), np.sin(tilt)
    if rng.random() < 0.5:
        normal = [s, 0.0, -c]
        e1 = [c, 0.0, s]
        e2 = [0.0, 1.0, 0.0]
    else:
        normal = [0.0, s, -c]
        e1 = [1.0, 0.0, 0.0]
        e2 = [0.0, c, s]
    w = rng.uniform(0.25, 0.4) * z
    planes.append(ScenePlane(p0=[0.0, 0.0, z], normal=normal, e1=e1, e2=e2,
                             texture=band_limited_texture(rng),
                             extent_a=(-w, w), extent_b=(-w, w),
                             tex_window=(-z, z)))
    step = rng.uniform(0.1, 0.25)
    poses = [RigidPose.from_axis_angle(
        rng.uniform(-0.01, 0.01, 3), [step * i, 0.0, 0.08 * i])
        for i in range(n_frames)]
    return SyntheticScene(planes=planes, K=K, poses=poses)


def generate_dataset(seed: int, n_scenes: int, n_frames: int = 3,
                     size: int = 64):
    """Deterministic mixed pool of corridor / fronto / slanted scenes."""
    rng = np.random.default_rng(seed)
    makers = (make_corridor_scene, make_fronto_scene, make_slanted_scene)
    scenes = []
    for i in range(n_scenes):
        maker = makers[i % len(makers)]
        if maker is make_fronto_scene:
            scenes.append(maker(rng, size=size, n_frames=n_frames,
                                with_dynamic=(i % 6 == 1)))
        else:
            scenes.append(maker(rng, size=size, n_frames=n_frames))
    return scenes


# -- the occlusion pathology scene -------------------------------------------

OCC_FX = 100.0
OCC_BASELINE = 1.0
OCC_TREE_DEPTH = 10.0    # disparity fx*b/z = 10 px
OCC_RECT_DEPTH = 20.0    # disparity 5 px
OCC_SIZE = 64


def _ramp_texture(lo: float, hi: float, tint, size: int = 256):
    ramp = np.linspace(lo, hi, size)
    tex = np.broadcast_to(ramp[None, :, None], (size, size, 3)).copy()
    return np.clip(tex * np.asarray(tint), 0.0, 1.0)


def make_occlusion_scene() -> SyntheticScene:
    """Background / far rectangle (depth 20) / near bar (depth 10) with a
    1-unit horizontal baseline: true disparities are 5 px and 10 px.

    The rectangle strip just left of the bar is visible in the target view
    but hidden behind the bar in the source view. The rectangle carries a
    gentle horizontal ramp, so a photometric sweep at an occluded pixel is
    expensive on the bar (wrong color entirely) and grows linearly with
    |d - 5| once it lands on the rectangle again — the minimum sits at the
    occluder's 10 px, not the true 5 px.
    """
    K = CameraModel(fx=OCC_FX, fy=OCC_FX, cx=(OCC_SIZE - 1) / 2.0,
                    cy=(OCC_SIZE - 1) / 2.0, width=OCC_SIZE, height=OCC_SIZE)
    # near bar: 15 px wide at depth 10 -> 1.5 world units
    tree_u = (36.0, 51.0)
    tz, rz = OCC_TREE_DEPTH, OCC_RECT_DEPTH
    tree_x = tuple((u - K.cx) / K.fx * tz for u in tree_u)
    rect_u = (2.0, 62.0)
    rect_x = tuple((u - K.cx) / K.fx * rz for u in rect_u)

    tree_tex = np.broadcast_to(np.array([0.55, 0.8, 0.95]),
                               (8, 8, 3)).copy()  # light blue, flat
    rect_tex = _ramp_texture(0.35, 0.65, [1.0, 0.55, 0.15])  # orange ramp
    planes = [
        ScenePlane.fronto(tz, tree_x, (-0.3 * tz, 0.3 * tz), tree_tex,
                          tex_window=(-tz, tz)),
        ScenePlane.fronto(rz, rect_x, (-0.4 * rz, 0.4 * rz), rect_tex,
                          tex_window=rect_x),
    ]
    poses = [RigidPose.identity(),
             RigidPose(np.eye(3), [OCC_BASELINE, 0.0, 0.0])]
    return SyntheticScene(planes=planes, K=K, poses=poses)


def occlusion_probe(scene: SyntheticScene | None = None):
    """Sweep integer disparities at an occluded rectangle pixel.

    Returns a dict with the probed pixel, the candidate disparities, their
    per-pixel photometric costs, the argmin, and the true disparity.
    """
    if scene is None:
        scene = make_occlusion_scene()
    K = scene.K
    img_t, d_t, _ = render_view(scene, 0)
    img_s, _, _ = render_view(scene, 1)
    vis = non_occluded_mask(scene, 0, 1)

    rect_disp = K.fx * OCC_BASELINE / OCC_RECT_DEPTH
    tree_disp = K.fx * OCC_BASELINE / OCC_TREE_DEPTH
    # occluded rectangle pixel adjacent to the bar's left edge
    row = K.height // 2
    occluded_cols = np.flatnonzero(
        (~vis[row]) & (np.abs(d_t.values[row] - OCC_RECT_DEPTH) < 1e-6))
    col = int(occluded_cols.max())  # closest to the bar

    disps = np.arange(0, 16)
    costs = []
    for d in disps:
        shifted = np.roll(img_s, int(d), axis=1)  # source sampled at u - d
        per_px = photometric_loss(img_t, shifted, reduce="per-pixel")
        costs.append(float(per_px.data[row, col]))
    costs = np.asarray(costs)
    return {"pixel": (row, col), "disparities": disps, "costs": costs,
            "argmin_disparity": int(disps[np.argmin(costs)]),
            "true_disparity": float(rect_disp),
            "occluder_disparity": float(tree_disp)}

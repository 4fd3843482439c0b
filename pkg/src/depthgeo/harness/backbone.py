"""Small convolutional encoder-decoder with a task switcher, plus the pose
network. The backbone stands in for a big generative trunk: one shared body,
two heads (depth / image reconstruction), task conditioning injected as
per-stage bias vectors selected by the switcher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..tensor import Tensor, as_tensor, avg_pool2, conv2d, parameter, upsample2

TASKS = ("depth", "recon")


def _conv_w(rng, kh, kw, cin, cout):
    return parameter(rng.normal(0.0, 1.0 / np.sqrt(kh * kw * cin),
                                (kh, kw, cin, cout)))


@dataclass
class ToyBackbone:
    """Shared trunk + switcher biases + depth/recon heads.

    Output spatial size equals the input; the depth head is tanh-bounded to
    [-1, 1] (mimicking a fixed decoder range), the reconstruction head is
    sigmoid-bounded to [0, 1].
    """
    params: dict
    c1: int = 12
    c2: int = 16

    @staticmethod
    def init(rng, c1: int = 12, c2: int = 16) -> "ToyBackbone":
        p = {
            "conv1": _conv_w(rng, 3, 3, 5, c1),  # RGB + 2 coordinate maps
            "bias1.depth": parameter(np.zeros(c1)),
            "bias1.recon": parameter(np.zeros(c1)),
            "conv2": _conv_w(rng, 3, 3, c1, c2),
            "bias2.depth": parameter(np.zeros(c2)),
            "bias2.recon": parameter(np.zeros(c2)),
            "conv3": _conv_w(rng, 3, 3, c2, c2),
            "b3": parameter(np.zeros(c2)),
            "conv4": _conv_w(rng, 3, 3, c2 + c1, c1),  # skip from h1
            "b4": parameter(np.zeros(c1)),
            "head.depth": _conv_w(rng, 3, 3, c1, 1),
            "head.depth.b": parameter(np.zeros(1)),
            "head.recon": _conv_w(rng, 3, 3, c1, 3),
            "head.recon.b": parameter(np.zeros(3)),
        }
        return ToyBackbone(params=p, c1=c1, c2=c2)

    def forward(self, image, task: str) -> dict:
        """image: (H, W, 3) or (N, H, W, 3) in [0, 1].

        Returns {"out", "features", "bottleneck"}; "out" is (..., H, W) for
        the depth task and (..., H, W, 3) for reconstruction.
        """
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        img = as_tensor(image)
        if img.data.min() < -1e-9 or img.data.max() > 1 + 1e-9:
            raise ValueError("backbone expects image intensities in [0, 1]")
        p = self.params
        # normalized pixel coordinates: depth layout is position-dependent,
        # and a purely convolutional trunk cannot recover position from
        # texture alone
        hh, ww = img.shape[-3], img.shape[-2]
        uu, vv = np.meshgrid(np.linspace(0.0, 1.0, ww),
                             np.linspace(0.0, 1.0, hh))
        coords = np.stack([uu, vv], axis=-1)
        coords = np.broadcast_to(coords, img.shape[:-1] + (2,))
        x = T.concat([img, as_tensor(coords.copy())], axis=-1)
        h1 = T.tanh(conv2d(x, p["conv1"]) + p[f"bias1.{task}"])
        h2 = T.tanh(conv2d(avg_pool2(h1), p["conv2"]) + p[f"bias2.{task}"])
        z = T.tanh(conv2d(h2, p["conv3"]) + p["b3"])          # bottleneck
        # full-resolution skip: the upsampled bottleneck alone is blocky
        feat = T.tanh(conv2d(T.concat([upsample2(z), h1], axis=-1),
                             p["conv4"]) + p["b4"])
        if task == "depth":
            raw = T.tanh(conv2d(feat, p["head.depth"]) + p["head.depth.b"])
            out = raw.reshape(raw.shape[:-1])
        else:
            out = T.sigmoid(conv2d(feat, p["head.recon"]) + p["head.recon.b"])
        return {"out": out, "features": feat, "bottleneck": z}

    def named_parameters(self) -> dict:
        return {f"backbone.{k}": v for k, v in self.params.items()}

    def parameters(self):
        return list(self.params.values())


def rodrigues(axis_angle) -> Tensor:
    """Differentiable exponential map: (3,) axis-angle to a 3x3 rotation.

    theta is regularized by 1e-18 under the square root, which keeps the
    sin(t)/t and (1-cos(t))/t^2 factors finite and correct to roundoff at
    the identity.
    """
    v = as_tensor(axis_angle)
    if v.shape != (3,):
        raise ValueError(f"axis-angle must be shape (3,), got {v.shape}")
    t2 = T.tsum(v * v) + 1e-18
    theta = T.sqrt(t2)
    a = T.sin(theta) / theta
    b = (1.0 - T.cos(theta)) / t2
    zero = Tensor(np.zeros(()))
    k = T.stack([
        T.stack([zero, -v[2], v[1]]),
        T.stack([v[2], zero, -v[0]]),
        T.stack([-v[1], v[0], zero]),
    ], axis=0)
    return as_tensor(np.eye(3)) + a * k + b * T.matmul(k, k)


@dataclass
class PoseHead:
    """Maps a concatenated frame pair to a 6-DoF relative pose."""
    params: dict
    ch: int = 8

    @staticmethod
    def init(rng, ch: int = 8) -> "PoseHead":
        p = {
            "p1": _conv_w(rng, 3, 3, 6, ch),
            "p2": _conv_w(rng, 3, 3, ch, ch),
            "p3": _conv_w(rng, 3, 3, ch, ch),
            "fc": parameter(rng.normal(0.0, 1.0 / np.sqrt(ch), (ch, 6))),
            "fc.b": parameter(np.zeros(6)),
        }
        return PoseHead(params=p, ch=ch)

    def forward(self, img_a, img_b):
        """Returns (axis_angle (..., 3), translation (..., 3)) on the tape.

        The rotation vector is component-bounded so its norm stays below
        pi; the 0.01 output scaling starts training near the identity.
        """
        a, b = as_tensor(img_a), as_tensor(img_b)
        x = avg_pool2(T.concat([a, b], axis=-1))  # pose needs no full res
        p = self.params
        h = T.tanh(conv2d(x, p["p1"]))
        h = T.tanh(conv2d(avg_pool2(h), p["p2"]))
        h = T.tanh(conv2d(avg_pool2(h), p["p3"]))
        h = avg_pool2(h)
        pooled = T.tmean(h, axis=(-3, -2))            # (..., ch)
        vec = (T.matmul(pooled, p["fc"]) + p["fc.b"]) * 0.01
        rot = (np.pi / np.sqrt(3.0)) * T.tanh(vec[..., :3])
        return rot, vec[..., 3:]

    def named_parameters(self) -> dict:
        return {f"pose.{k}": v for k, v in self.params.items()}

    def parameters(self):
        return list(self.params.values())

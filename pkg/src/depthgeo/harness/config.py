"""Training configuration and the flat `key = value` config-file format.

Keys are namespaced: `train.*` for loop/optimizer settings, `loss.*` for
loss weights. Example file:

    train.seed = 7
    train.lambda_mix = 0.3
    loss.eta_p1 = 0.85
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from ..losses import LossWeights


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    image_size: int = 64
    lambda_mix: float = 0.3
    step_max: int = 2000
    lr: float = 3e-3
    weight_decay: float = 1e-4
    surrogate: str = "photometric"     # photometric | latent | off
    use_ssg: bool = True
    use_mir: bool = True               # off -> no reconstruction task at all
    warp_sources: str = "both"         # both (min-reduction) | next
    d_min: float = 0.1
    d_max: float = 100.0
    n_train_scenes: int = 48
    n_aux_scenes: int = 12
    n_val_scenes: int = 6
    val_interval: int = 200
    # freezing schedule: phase 1 trains everything, phase 2 freezes the
    # refinement and pose modules, phase 3 unfreezes them again. Phase 2
    # starts at phase1_frac * step_max; 2 -> 3 advances on a loss plateau
    # (moving-average improvement below plateau_tol), or at phase3_latest
    # at the latest.
    phase1_frac: float = 0.6
    phase3_latest_frac: float = 0.8
    plateau_window: int = 100
    plateau_tol: float = 0.005
    # normalized-teacher warmup of the backbone at the start of phase 1;
    # stands in for a pretrained scale/shift-invariant initialization
    warmup_frac: float = 0.2
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not (0.0 <= self.lambda_mix <= 1.0):
            raise ValueError("lambda_mix must lie in [0, 1]")
        if self.surrogate not in ("photometric", "latent", "off"):
            raise ValueError(f"unknown surrogate mode {self.surrogate!r}")
        if self.warp_sources not in ("both", "next"):
            raise ValueError(f"unknown warp_sources {self.warp_sources!r}")
        if not (0.0 < self.phase1_frac <= self.phase3_latest_frac <= 1.0):
            raise ValueError("phase boundaries must be ordered within (0, 1]")
        if self.step_max <= 0 or self.batch_size <= 0:
            raise ValueError("step_max and batch_size must be positive")
        if not (0.0 <= self.warmup_frac <= self.phase1_frac):
            raise ValueError("warmup must fit inside phase 1")

    def warmup_end(self) -> int:
        return int(round(self.warmup_frac * self.step_max))

    def phase1_end(self) -> int:
        return int(round(self.phase1_frac * self.step_max))

    def phase3_latest(self) -> int:
        return int(round(self.phase3_latest_frac * self.step_max))


_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _coerce(current, text: str):
    if isinstance(current, bool):
        try:
            return _BOOL[text.lower()]
        except KeyError:
            raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key or not val:
            raise ValueError(f"line {ln}: empty key or value")
        out[key] = val
    return out


def config_from_entries(entries: dict, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    train_fields = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)
                    if f.name != "loss"}
    loss_fields = {f.name: getattr(cfg.loss, f.name) for f in fields(LossWeights)}
    train_kw, loss_kw = {}, {}
    for key, text in entries.items():
        if "." not in key:
            raise ValueError(f"config key {key!r} must be namespaced "
                             "(train.* or loss.*)")
        ns, name = key.split(".", 1)
        if ns == "train":
            if name not in train_fields:
                raise ValueError(f"unknown config key {key!r}")
            train_kw[name] = _coerce(train_fields[name], text)
        elif ns == "loss":
            if name not in loss_fields:
                raise ValueError(f"unknown config key {key!r}")
            loss_kw[name] = _coerce(loss_fields[name], text)
        else:
            raise ValueError(f"unknown config namespace {ns!r}")
    cfg = replace(cfg, **train_kw)
    if loss_kw:
        cfg = replace(cfg, loss=replace(cfg.loss, **loss_kw))
    return cfg


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    with open(path) as f:
        return config_from_entries(parse_config_text(f.read()), base)

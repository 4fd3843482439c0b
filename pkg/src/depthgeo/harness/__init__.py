"""Training harness: toy backbone, pose network, optimizer, loop, CLI."""

from .backbone import PoseHead, ToyBackbone, rodrigues
from .config import TrainConfig, load_config
from .optim import AdamW
from .train import TrainState, mix_batch, run_training, train_step

__all__ = [
    "ToyBackbone", "PoseHead", "rodrigues", "TrainConfig", "load_config",
    "AdamW", "TrainState", "mix_batch", "train_step", "run_training",
]

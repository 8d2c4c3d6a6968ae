"""Toy multimodal model with selective visual unlearning.

Train a small vision+text model to memorize entity attributes, then erase
a chosen subset of its visual knowledge with contrastive low-rank adapters
whose updates are confined to the null space of retained activations.
"""

__version__ = "0.1.0"

from .engine import (TrainConfig, VanillaConfig, sweep, train_vanilla,
                     unlearn_continual, unlearn_ga, unlearn_static)
from .evaluate import eval_suite, export_continual, rouge_l
from .losses import LossWeights, NegativeQueue, total_loss
from .model import ModelConfig, ToyModel
from .ncu import build_basis, collect_activations, init_lora_ncu, verify_nullspace
from .world import World, WorldConfig, generate_world, partition_continual

__all__ = [
    "LossWeights", "ModelConfig", "NegativeQueue", "ToyModel", "TrainConfig",
    "VanillaConfig", "World", "WorldConfig", "build_basis",
    "collect_activations", "eval_suite", "export_continual", "generate_world",
    "init_lora_ncu", "partition_continual", "rouge_l", "sweep", "total_loss",
    "train_vanilla", "unlearn_continual", "unlearn_ga", "unlearn_static",
    "verify_nullspace",
]

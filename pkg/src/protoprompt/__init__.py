"""Class-prompted segmentation over precomputed image embeddings.

A prototype bank turns a class id into dense and sparse prompt embeddings,
a small two-way decoder turns them into mask logits, and training combines
dice loss with a prototype contrastive loss. Everything runs on a small
reverse-mode autodiff engine backed by numpy (with optional compiled
kernels).
"""

from .config import SynthConfig, TrainConfig
from .errors import ProtoPromptError
from .model import ModelState, forward, init_model, load_checkpoint, save_checkpoint
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ModelState",
    "ProtoPromptError",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "forward",
    "init_model",
    "load_checkpoint",
    "save_checkpoint",
]

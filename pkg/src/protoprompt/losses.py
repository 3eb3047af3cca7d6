"""Training objective: dice on sigmoid probabilities plus prototype contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyMaskError, ShapeError
from .tensor import Tensor, as_tensor

DICE_SMOOTH = 1.0


@dataclass
class LossBreakdown:
    dice: float
    pcl: float
    total: float
    tau: float


def class_embedding(embedding, mask) -> Tensor:
    """Masked average of ``(h, w, d)`` features over the foreground of ``mask`` ``(h, w)``."""
    embedding = as_tensor(embedding)
    mask = np.asarray(mask, dtype=embedding.dtype)
    if mask.shape != embedding.shape[-3:-1]:
        raise ShapeError(f"mask {mask.shape} does not match embedding grid {embedding.shape[-3:-1]}")
    count = mask.sum()
    if count == 0:
        raise EmptyMaskError("mask has no foreground cells")
    return T.masked_sum(embedding, mask[..., None], axis=(-3, -2)) / count


def prototype_contrastive_loss(prototypes, class_embeddings, tau: float) -> Tensor:
    """InfoNCE with prototype ``k`` as anchor, ``v_k`` positive and ``v_q`` (q != k) negatives.

    ``prototypes`` and ``class_embeddings`` are row-aligned ``(C, d)`` tables.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    prototypes, class_embeddings = as_tensor(prototypes), as_tensor(class_embeddings)
    if prototypes.shape != class_embeddings.shape or prototypes.ndim != 2:
        raise ShapeError(f"prototype table {prototypes.shape} vs embeddings {class_embeddings.shape}")
    c = prototypes.shape[0]
    logits = (prototypes @ T.transpose(class_embeddings)) / tau  # (C, C)
    idx = np.arange(c)
    positive = logits[(idx, idx)]
    return T.mean(T.logsumexp(logits, axis=1) - positive)


def dice_loss_from_probs(probs, target) -> Tensor:
    """``1 - (2 sum m g + eps) / (sum m^2 + sum g^2 + eps)`` over the last two axes, averaged over the rest."""
    probs = as_tensor(probs)
    target = np.asarray(target, dtype=probs.dtype)
    if probs.shape != target.shape:
        raise ShapeError(f"prediction {probs.shape} vs target {target.shape}")
    inter = T.sum_(probs * target, axis=(-2, -1))
    denom = T.sum_(probs * probs, axis=(-2, -1)) + (target * target).sum(axis=(-2, -1))
    coeff = (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return T.mean(1 - coeff)


def dice_loss(logits, target) -> Tensor:
    return dice_loss_from_probs(T.sigmoid(as_tensor(logits)), target)


def total_loss(dice, pcl):
    return dice + pcl

"""Segmentation metrics over (image, prompted class) pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Sample
from .errors import ShapeError
from .tensor import stable_sigmoid

EVAL_BATCH = 64


def binarize(logits, threshold: float = 0.5) -> np.ndarray:
    """``sigmoid(logits) > threshold`` (strict)."""
    logits = np.asarray(getattr(logits, "data", logits))
    return stable_sigmoid(logits) > threshold


def iou(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


@dataclass
class PairResult:
    sample_id: str
    class_id: int
    iou: float


@dataclass
class MetricsReport:
    per_class: dict[int, float]
    challenge_iou: float
    iou: float
    mc_iou: float
    pairs: list[PairResult] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["name,value"]
        rows += [f"class_{k},{v:.6f}" for k, v in sorted(self.per_class.items())]
        rows += [f"challenge_iou,{self.challenge_iou:.6f}", f"iou,{self.iou:.6f}", f"mc_iou,{self.mc_iou:.6f}"]
        return "\n".join(rows) + "\n"


def _mean(values):
    return math.fsum(values) / len(values) if values else 0.0


def summarize(pairs: Sequence[PairResult], num_classes: int, predicted: dict | None = None) -> MetricsReport:
    """Aggregate pair IoUs.

    Challenge IoU averages only over classes present in each image's ground
    truth. IoU averages over every class that is present in the ground truth
    or has a non-empty prediction; ``predicted`` maps sample id to the set of
    classes with a non-empty prediction and an absent class can only
    appear there when it was prompted, which class prompting never does.
    """
    challenge = _mean([p.iou for p in pairs])
    by_image: dict[str, dict[int, float]] = {}
    for p in pairs:
        by_image.setdefault(p.sample_id, {})[p.class_id] = p.iou
    all_class_values = []
    for sid, scores in by_image.items():
        extra = (predicted or {}).get(sid, set())
        for k in range(1, num_classes + 1):
            if k in scores:
                all_class_values.append(scores[k])
            elif k in extra:
                all_class_values.append(0.0)
    per_class = {}
    for k in range(1, num_classes + 1):
        vals = [p.iou for p in pairs if p.class_id == k]
        if vals:
            per_class[k] = _mean(vals)
    return MetricsReport(per_class, challenge, _mean(all_class_values), _mean(list(per_class.values())), list(pairs))


def evaluate(state, samples: Sequence[Sample], threshold: float = 0.5) -> MetricsReport:
    """Prompt every present class of every image, binarize, and score against its mask."""
    from .model import forward

    jobs = [(s, c) for s in samples for c in s.prompts]
    results = []
    for start in range(0, len(jobs), EVAL_BATCH):
        chunk = jobs[start:start + EVAL_BATCH]
        embeddings = np.stack([s.embedding for s, _ in chunk])
        classes = np.array([c for _, c in chunk])
        logits = forward(state, embeddings, classes).logits.data
        preds = binarize(logits, threshold)
        for (s, c), pred in zip(chunk, preds):
            results.append(PairResult(s.sample_id, c, iou(pred, s.masks[c].at(pred.shape))))
    return summarize(results, state.num_classes)

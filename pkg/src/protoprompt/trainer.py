"""Efficient tuning loop: Adam over the prompt encoder, decoder, prototypes and output tokens."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import GroundTruthMask, Sample, load_dataset
from .errors import ConfigError, EmptyMaskError, MissingClassError, NumericError
from .losses import LossBreakdown, class_embedding, dice_loss, prototype_contrastive_loss, total_loss
from .model import ModelState, forward, init_model

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Pair:
    """One training prompt: an image embedding and one class present in it."""

    embedding: np.ndarray
    class_id: int
    mask: GroundTruthMask

    @cached_property
    def class_embedding(self) -> np.ndarray:
        return class_embedding(self.embedding, self.mask.coarse).data


def make_pairs(samples: Sequence[Sample]) -> list[Pair]:
    return [Pair(s.embedding, c, s.masks[c]) for s in samples for c in s.prompts]


@dataclass
class TrainHistory:
    losses: list[LossBreakdown] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    snapshots: list[tuple[int, object]] = field(default_factory=list)

    def __len__(self):
        return len(self.losses)

    def totals(self) -> np.ndarray:
        return np.array([b.total for b in self.losses])

    def to_csv(self, include_time=True) -> str:
        head = "step,dice,pcl,total" + (",seconds" if include_time else "")
        rows = [head]
        for i, b in enumerate(self.losses, 1):
            row = f"{i},{b.dice:.8f},{b.pcl:.8f},{b.total:.8f}"
            if include_time:
                row += f",{self.seconds[i - 1]:.6f}"
            rows.append(row)
        return "\n".join(rows) + "\n"


def batch_pcl(prototypes, batch: Sequence[Pair], tau: float):
    """Contrastive loss over the classes prompted in ``batch``.

    Each present class contributes the mean class embedding of its pairs;
    classes absent from the batch drop out of both sums.
    """
    present = sorted({p.class_id for p in batch})
    table = np.stack([np.mean([p.class_embedding for p in batch if p.class_id == k], axis=0) for k in present])
    rows = T.getitem(prototypes, np.array(present) - 1)
    return prototype_contrastive_loss(rows, table.astype(np.float32), tau)


def batch_loss(state: ModelState, batch: Sequence[Pair], config: TrainConfig):
    """(total, dice, pcl) tensors for one batch."""
    for p in batch:
        if not p.mask.full.any():
            raise EmptyMaskError(f"class {p.class_id} absent from its mask")
    embeddings = np.stack([p.embedding for p in batch])
    classes = np.array([p.class_id for p in batch])
    logits = forward(state, embeddings, classes).logits
    targets = np.stack([p.mask.at(logits.shape[-2:]) for p in batch])
    dice = dice_loss(logits, targets)
    if config.pcl_enabled:
        pcl = batch_pcl(state.prototypes, batch, config.tau)
    else:
        pcl = T.Tensor(0.0)
    return total_loss(dice, pcl), dice, pcl


def adam_update(state: ModelState, params, grads, lr: float):
    state.step += 1
    t = state.step
    c1 = 1 - ADAM_BETA1 ** t
    c2 = 1 - ADAM_BETA2 ** t
    for _group, name, p in params:
        g = grads[p.node_id].astype(np.float32, copy=False)
        m, v = state.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        state.moments[name] = (m, v)
        step = (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(np.float32)
        p.data = (p.data - step).astype(np.float32)


def train_step(state: ModelState, batch: Sequence[Pair], config: TrainConfig) -> LossBreakdown:
    """Forward, backward and one Adam update; frozen tensors are never touched."""
    total, dice, pcl = batch_loss(state, batch, config)
    if not np.isfinite(total.data).all():
        raise NumericError("non-finite training loss")
    params = state.trainable(fixed_prototypes=config.fixed_prototypes)
    grads = T.backward(total, [t for _, _, t in params])
    adam_update(state, params, grads, config.lr)
    return LossBreakdown(float(dice.data), float(pcl.data), float(total.data), config.tau)


def compute_fixed_prototypes(samples: Sequence[Sample], num_classes: int) -> np.ndarray:
    """Per-class mean of class embeddings over every training image containing the class."""
    sums = np.zeros((num_classes, samples[0].embedding.shape[-1]) if samples else (num_classes, 0))
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        for c in s.prompts:
            sums[c - 1] += class_embedding(s.embedding.astype(np.float64), s.masks[c].coarse).data
            counts[c - 1] += 1
    missing = [k + 1 for k in range(num_classes) if counts[k] == 0]
    if missing:
        raise MissingClassError(f"classes never seen in training data: {missing}")
    return (sums / counts[:, None]).astype(np.float32)


def batches(pairs: Sequence[Pair], batch_size: int, rng: np.random.Generator):
    """Endless stream of batches, reshuffled every epoch; the last batch of an epoch may be short."""
    while True:
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), batch_size):
            yield [pairs[i] for i in order[start:start + batch_size]]


def fit(
    config: TrainConfig,
    train: Sequence[Sample] | None = None,
    log: Callable[[int, LossBreakdown, float], None] | None = None,
    evaluate_every: int = 0,
    eval_set: Sequence[Sample] | None = None,
) -> tuple[ModelState, TrainHistory]:
    config.validate()
    if train is None:
        train = load_dataset(config.train_manifest, config.num_classes)
    for s in train:
        if s.embedding.shape[-1] != config.channels:
            raise ConfigError(f"{s.sample_id}: embedding has {s.embedding.shape[-1]} channels, config says {config.channels}")
    state = init_model(config)
    if config.fixed_prototypes:
        state.prototypes.data = compute_fixed_prototypes(train, config.num_classes)
    history = TrainHistory()
    pairs = make_pairs(train)
    if config.max_steps and not pairs:
        raise ConfigError("training set contains no prompts")
    stream = batches(pairs, config.batch_size, np.random.default_rng([config.seed, 1]))
    for step in range(1, config.max_steps + 1):
        started = time.perf_counter()
        breakdown = train_step(state, next(stream), config)
        elapsed = time.perf_counter() - started
        history.losses.append(breakdown)
        history.seconds.append(elapsed)
        if log is not None:
            log(step, breakdown, elapsed)
        if evaluate_every and eval_set is not None and step % evaluate_every == 0:
            from .metrics import evaluate

            history.snapshots.append((step, evaluate(state, eval_set)))
    return state, history

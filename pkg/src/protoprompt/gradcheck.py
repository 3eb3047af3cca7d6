"""Finite-difference check of the full training loss at toy scale."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import GroundTruthMask
from .model import TRAINABLE_GROUPS, ModelState, init_model
from .trainer import Pair, batch_loss

DEFAULT_SCALE = {"h": 4, "w": 4, "d": 8, "C": 2, "n": 2, "r": 8, "L": 1}


def parse_scale(text: str | None) -> dict:
    scale = dict(DEFAULT_SCALE)
    if text:
        for item in text.split(","):
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in scale:
                raise ValueError(f"unknown scale key {key!r}; expected one of {sorted(scale)}")
            scale[key] = int(value)
    return scale


def toy_problem(seed: int, scale: dict) -> tuple[ModelState, list[Pair], TrainConfig]:
    """A model and one batch that prompts every class once."""
    h, w, d, c = scale["h"], scale["w"], scale["d"], scale["C"]
    config = TrainConfig(
        num_classes=c, channels=d, n_tokens=scale["n"], r_dense=scale["r"], r_sparse=scale["r"],
        num_layers=scale["L"], seed=seed,
    )
    state = init_model(config)
    rng = np.random.default_rng([seed, 2])
    u = config.upscale
    pairs = []
    for k in range(1, c + 1):
        embedding = rng.uniform(-2, 2, size=(h, w, d)).astype(np.float32)
        coarse = (rng.random((h, w)) < 0.4).astype(np.uint8)
        coarse[rng.integers(h), rng.integers(w)] = 1
        full = np.repeat(np.repeat(coarse, u, axis=0), u, axis=1)
        pairs.append(Pair(embedding, k, GroundTruthMask(k, full, coarse)))
    return state, pairs, config


@dataclass
class GroupReport:
    errors: dict[str, float]  # group -> max relative error
    frozen_grad_max: float  # largest |grad| reaching a frozen tensor
    tol: float

    @property
    def failing(self) -> list[str]:
        return [g for g, e in self.errors.items() if not e < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failing and self.frozen_grad_max == 0.0


def full_model_gradcheck(seed=0, scale=None, eps=1e-5, tol=1e-4, max_elements=10_000) -> GroupReport:
    state, pairs, config = toy_problem(seed, scale or dict(DEFAULT_SCALE))
    trainable = state.trainable()
    params = [t for _, _, t in trainable]
    names = [n for _, n, _ in trainable]

    def loss():
        return batch_loss(state, pairs, config)[0]

    report = T.grad_check(loss, params, eps=eps, tol=tol, max_elements=max_elements, seed=seed, names=names)
    groups = {g: 0.0 for g in TRAINABLE_GROUPS}
    for group, name, _ in trainable:
        groups[group] = max(groups[group], report.errors[name])

    frozen = [t for _, _, t in state.frozen()]
    grads = T.backward(loss(), frozen)
    frozen_max = max(float(np.abs(grads[t.node_id]).max()) for t in frozen)
    return GroupReport(groups, frozen_max, tol)


@contextlib.contextmanager
def wrong_relu_gradient(factor=0.5):
    """Negative control: scale the ReLU backward rule so analytic gradients are wrong."""
    original = T.ReLU.backward

    def broken(self, grad):
        (g,) = original(self, grad)
        return (g * factor,)

    T.ReLU.backward = broken
    try:
        yield
    finally:
        T.ReLU.backward = original

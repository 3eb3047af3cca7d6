"""Small parameter containers shared by the encoder and decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


@dataclass
class Affine:
    """``x @ weight + bias`` with weight stored (in, out)."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, fan_in, fan_out):
        return cls(
            Tensor(xavier_uniform(rng, fan_in, fan_out), requires_grad=True),
            Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True),
        )

    @classmethod
    def zeros(cls, fan_in, fan_out):
        return cls(
            Tensor(np.zeros((fan_in, fan_out)), requires_grad=True),
            Tensor(np.zeros(fan_out), requires_grad=True),
        )

    @property
    def fan_in(self):
        return self.weight.shape[0]

    @property
    def fan_out(self):
        return self.weight.shape[1]

    def __call__(self, x):
        return x @ self.weight + self.bias

    def named_parameters(self, prefix):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


@dataclass
class LayerNorm:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""

    gain: Tensor
    shift: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, dim):
        return cls(
            Tensor(np.ones(dim, dtype=np.float32), requires_grad=True),
            Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True),
        )

    def __call__(self, x):
        centred = x - T.mean(x, axis=-1, keepdims=True)
        var = T.mean(centred * centred, axis=-1, keepdims=True)
        return centred / T.sqrt(var + self.eps) * self.gain + self.shift

    def named_parameters(self, prefix):
        return [(f"{prefix}.gain", self.gain), (f"{prefix}.shift", self.shift)]

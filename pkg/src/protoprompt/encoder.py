"""Prototype-based class prompt encoder.

Shapes use channel-last grids. Any leading axes (e.g. a batch axis) are
carried through unchanged, so every function accepts either one image
embedding ``(h, w, d)`` or a stack ``(N, h, w, d)``. Class ids are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ClassError, ShapeError
from .layers import Affine
from .tensor import Tensor, as_tensor


@dataclass
class PromptMlpParams:
    """Dense path ``d -> r_D -> d`` and sparse path ``d -> r_S -> n*d``."""

    f_dense: Affine
    g_dense: Affine
    f_sparse: Affine
    g_sparse: Affine
    n_tokens: int

    @classmethod
    def init(cls, rng, channels, r_dense, r_sparse, n_tokens):
        if min(r_dense, r_sparse, n_tokens) < 1:
            raise ValueError("r_dense, r_sparse and n_tokens must be >= 1")
        return cls(
            Affine.init(rng, channels, r_dense),
            Affine.init(rng, r_dense, channels),
            Affine.init(rng, channels, r_sparse),
            Affine.init(rng, r_sparse, n_tokens * channels),
            n_tokens,
        )

    @property
    def channels(self):
        return self.f_dense.fan_in

    def named_parameters(self):
        return {
            "dense_mlp": self.f_dense.named_parameters("f_dense") + self.g_dense.named_parameters("g_dense"),
            "sparse_mlp": self.f_sparse.named_parameters("f_sparse") + self.g_sparse.named_parameters("g_sparse"),
        }


@dataclass
class PolarityEmbeddings:
    """Frozen positive/negative tags added to sparse tokens."""

    positive: Tensor
    negative: Tensor

    @classmethod
    def init(cls, rng, channels):
        # frozen by construction: requires_grad stays False
        pos = rng.standard_normal(channels).astype(np.float32)
        neg = rng.standard_normal(channels).astype(np.float32)
        return cls(Tensor(pos, name="lambda_pos"), Tensor(neg, name="lambda_neg"))

    def named_parameters(self):
        return [("lambda_pos", self.positive), ("lambda_neg", self.negative)]


def compute_similarity(embedding, prototypes) -> Tensor:
    """Dot product of every location with every prototype: ``(..., h, w, d) -> (..., C, h, w)``."""
    embedding, prototypes = as_tensor(embedding), as_tensor(prototypes)
    if embedding.ndim < 3 or prototypes.ndim != 2:
        raise ShapeError("expected embedding (..., h, w, d) and prototypes (C, d)")
    if embedding.shape[-1] != prototypes.shape[1]:
        raise ShapeError(f"channel mismatch: embedding d={embedding.shape[-1]}, prototypes d={prototypes.shape[1]}")
    sim = embedding @ T.transpose(prototypes)  # (..., h, w, C)
    nd = sim.ndim
    return T.transpose(sim, tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2))


def activate_features(embedding, similarity) -> Tensor:
    """Residual spatial attention ``F * S_k + F`` for every class: ``-> (..., C, h, w, d)``."""
    embedding, similarity = as_tensor(embedding), as_tensor(similarity)
    lead = embedding.shape[:-3]
    h, w, d = embedding.shape[-3:]
    if similarity.shape[:-3] != lead or similarity.shape[-2:] != (h, w):
        raise ShapeError(f"similarity {similarity.shape} does not match embedding {embedding.shape}")
    c = similarity.shape[-3]
    feats = T.reshape(embedding, lead + (1, h, w, d))
    attn = T.reshape(similarity, lead + (c, h, w, 1))
    return feats * attn + feats


def select_class(features, class_ids) -> Tensor:
    """Pick the class-activated grid of each prompted class: ``(..., C, h, w, d) -> (..., h, w, d)``."""
    features = as_tensor(features)
    num_classes = features.shape[-4]
    ids = _check_class_ids(class_ids, num_classes, features.shape[:-4])
    if ids.ndim == 0:
        return features[int(ids) - 1]
    lead = np.indices(ids.shape, sparse=True)
    return features[tuple(lead) + (ids - 1,)]


def encode_dense(activated, params: PromptMlpParams) -> Tensor:
    """Per-location two-layer MLP of the prompted class's activated feature."""
    activated = as_tensor(activated)
    if activated.shape[-1] != params.channels:
        raise ShapeError(f"dense encoder expects {params.channels} channels, got {activated.shape[-1]}")
    return params.g_dense(T.relu(params.f_dense(activated)))


def encode_sparse(activated, class_ids, params: PromptMlpParams, polarity: PolarityEmbeddings) -> Tensor:
    """Sparse prompt tokens for all classes, tagged by polarity.

    ``activated`` is ``(..., C, h, w, d)``. Each class grid goes through
    ``f_sparse`` per location, ReLU, a spatial mean, then ``g_sparse`` to
    ``n*d`` values reshaped to ``n`` tokens. The prompted class's tokens get
    the positive embedding, all others the negative one. Returns the
    class-major flattened tokens ``(..., C*n, d)``.
    """
    activated = as_tensor(activated)
    lead = activated.shape[:-4]
    num_classes, d = activated.shape[-4], activated.shape[-1]
    if d != params.channels:
        raise ShapeError(f"sparse encoder expects {params.channels} channels, got {d}")
    ids = _check_class_ids(class_ids, num_classes, lead)
    n = params.n_tokens
    hidden = T.relu(params.f_sparse(activated))
    pooled = T.mean(hidden, axis=(-3, -2))  # (..., C, r_S)
    tokens = T.reshape(params.g_sparse(pooled), lead + (num_classes, n, d))
    onehot = (np.arange(1, num_classes + 1) == ids[..., None]).astype(tokens.dtype)
    onehot = onehot.reshape(lead + (num_classes, 1, 1))
    tagged = tokens + onehot * T.reshape(polarity.positive, (1, d)) + (1 - onehot) * T.reshape(polarity.negative, (1, d))
    return T.reshape(tagged, lead + (num_classes * n, d))


def _check_class_ids(class_ids, num_classes, lead):
    ids = np.asarray(class_ids)
    if ids.dtype.kind not in "iu":
        raise ClassError(f"class ids must be integers, got {ids.dtype}")
    if ids.shape != lead and not (ids.ndim == 0 and lead == ()):
        raise ShapeError(f"class ids shape {ids.shape} does not match leading axes {lead}")
    if ids.size and (ids.min() < 1 or ids.max() > num_classes):
        raise ClassError(f"class id out of range 1..{num_classes}: {ids.tolist()}")
    return ids


def export_similarity_map(similarity, class_id) -> np.ndarray:
    """Min-max normalise one class's similarity map to [0, 1] (float32).

    A constant map normalises to all zeros.
    """
    sim = similarity.data if isinstance(similarity, Tensor) else np.asarray(similarity)
    _check_class_ids(class_id, sim.shape[-3], ())
    s = sim[int(class_id) - 1].astype(np.float32)
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.zeros_like(s)
    return ((s - lo) / (hi - lo)).astype(np.float32)

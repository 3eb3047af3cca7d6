"""A compact two-way transformer mask decoder.

The image stream starts as ``F + T_D`` and the token stream as the output
tokens followed by the sparse prompt tokens. Each layer runs token
self-attention, token-to-image attention, a token MLP and image-to-token
attention, each residual and followed by a layer norm. No positional
encodings. The image stream is then
upscaled bilinearly, projected per pixel, and dotted with the projected
mask token to give logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import Affine, LayerNorm
from .tensor import Tensor, as_tensor


@dataclass
class Attention:
    q: Affine
    k: Affine
    v: Affine
    o: Affine
    heads: int = 1

    @classmethod
    def init(cls, rng, dim, heads=1):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        return cls(*(Affine.init(rng, dim, dim) for _ in range(4)), heads=heads)

    def __call__(self, queries, context, record=None):
        q, k, v = self.q(queries), self.k(context), self.v(context)
        if self.heads > 1:
            q, k, v = (self._split(x) for x in (q, k, v))
        scale = 1.0 / math.sqrt(q.shape[-1])
        probs = T.softmax((q @ T.transpose(k, _swap_last(k.ndim))) * scale, axis=-1)
        if record is not None:
            record.append(probs.data)
        out = probs @ v
        if self.heads > 1:
            out = self._merge(out)
        return self.o(out)

    def _split(self, x):
        *lead, t, d = x.shape
        nd = len(lead)
        x = T.reshape(x, tuple(lead) + (t, self.heads, d // self.heads))
        return T.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))

    def _merge(self, x):
        *lead, h, t, dh = x.shape
        nd = len(lead)
        x = T.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))
        return T.reshape(x, tuple(lead) + (t, h * dh))

    def named_parameters(self, prefix):
        out = []
        for name in "qkvo":
            out += getattr(self, name).named_parameters(f"{prefix}.{name}")
        return out


def _swap_last(ndim):
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


@dataclass
class DecoderLayer:
    self_attn: Attention
    token_to_image: Attention
    mlp_in: Affine
    mlp_out: Affine
    image_to_token: Attention
    norms: list[LayerNorm]

    @classmethod
    def init(cls, rng, dim, heads=1):
        return cls(
            Attention.init(rng, dim, heads),
            Attention.init(rng, dim, heads),
            Affine.init(rng, dim, 4 * dim),
            Affine.init(rng, 4 * dim, dim),
            Attention.init(rng, dim, heads),
            [LayerNorm.init(dim) for _ in range(4)],
        )

    def __call__(self, tokens, image, record=None):
        n1, n2, n3, n4 = self.norms
        tokens = n1(tokens + self.self_attn(tokens, tokens, record))
        tokens = n2(tokens + self.token_to_image(tokens, image, record))
        tokens = n3(tokens + self.mlp_out(T.relu(self.mlp_in(tokens))))
        image = n4(image + self.image_to_token(image, tokens, record))
        return tokens, image

    def named_parameters(self, prefix):
        out = (
            self.self_attn.named_parameters(f"{prefix}.self_attn")
            + self.token_to_image.named_parameters(f"{prefix}.token_to_image")
            + self.mlp_in.named_parameters(f"{prefix}.mlp_in")
            + self.mlp_out.named_parameters(f"{prefix}.mlp_out")
            + self.image_to_token.named_parameters(f"{prefix}.image_to_token")
        )
        for i, norm in enumerate(self.norms):
            out += norm.named_parameters(f"{prefix}.norm{i + 1}")
        return out


@dataclass
class DecoderParams:
    layers: list[DecoderLayer]
    pixel_proj: Affine
    mask_head: Affine
    upscale: int = 4
    heads: int = 1

    @classmethod
    def init(cls, rng, dim, num_layers=2, heads=1, upscale=4, head_dim=None):
        head_dim = head_dim or max(dim // 2, 1)
        return cls(
            [DecoderLayer.init(rng, dim, heads) for _ in range(num_layers)],
            Affine.init(rng, dim, head_dim),
            Affine.init(rng, dim, head_dim),
            upscale,
            heads,
        )

    @property
    def dim(self):
        return self.pixel_proj.fan_in

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"layers.{i}")
        return out + self.pixel_proj.named_parameters("pixel_proj") + self.mask_head.named_parameters("mask_head")


def decode_mask(embedding, dense, sparse, output_tokens, params: DecoderParams, record: list | None = None) -> Tensor:
    """Mask logits ``(..., u*h, u*w)`` for the prompted class.

    ``embedding`` and ``dense`` are ``(..., h, w, d)``, ``sparse`` is
    ``(..., C*n, d)`` and ``output_tokens`` is ``(n_out, d)`` (shared over the
    leading axes). If ``record`` is a list, every attention probability
    array is appended to it.
    """
    embedding, dense, sparse, output_tokens = (as_tensor(x) for x in (embedding, dense, sparse, output_tokens))
    lead = embedding.shape[:-3]
    h, w, d = embedding.shape[-3:]
    if dense.shape != embedding.shape:
        raise ShapeError(f"dense prompt {dense.shape} does not match embedding {embedding.shape}")
    if sparse.shape[:-2] != lead or sparse.shape[-1] != d:
        raise ShapeError(f"sparse prompt {sparse.shape} incompatible with embedding {embedding.shape}")
    if output_tokens.ndim != 2 or output_tokens.shape[1] != d or params.dim != d:
        raise ShapeError(f"output tokens {output_tokens.shape} / decoder width {params.dim} != {d}")

    image = T.reshape(embedding + dense, lead + (h * w, d))
    n_out = output_tokens.shape[0]
    tokens = T.concat([T.broadcast_to(output_tokens, lead + (n_out, d)), sparse], axis=-2)
    for layer in params.layers:
        tokens, image = layer(tokens, image, record)

    u = params.upscale
    grid = T.upsample_bilinear(T.reshape(image, lead + (h, w, d)), u)
    pixels = params.pixel_proj(grid)  # (..., uh, uw, d')
    mask_token = tokens[(Ellipsis, slice(0, 1), slice(None))]
    head = params.mask_head(mask_token)  # (..., 1, d')
    dp = head.shape[-1]
    flat = T.reshape(pixels, lead + (u * h * u * w, dp))
    logits = flat @ T.reshape(head, lead + (dp, 1))
    return T.reshape(logits, lead + (u * h, u * w))


def init_output_tokens(rng, n_out, dim) -> Tensor:
    return Tensor(rng.standard_normal((n_out, dim)).astype(np.float32), requires_grad=True)

"""Model state, initialisation and the end-to-end forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data
from .config import TrainConfig
from .decoder import DecoderParams, decode_mask, init_output_tokens
from .encoder import (
    PolarityEmbeddings,
    PromptMlpParams,
    activate_features,
    compute_similarity,
    encode_dense,
    encode_sparse,
    select_class,
)
from .errors import ConfigError, FormatError
from .tensor import Tensor

TRAINABLE_GROUPS = ("prototypes", "dense_mlp", "sparse_mlp", "decoder", "output_tokens")
FROZEN_GROUPS = ("polarity",)


@dataclass
class ModelState:
    prototypes: Tensor  # (C, d)
    prompt: PromptMlpParams
    polarity: PolarityEmbeddings
    decoder: DecoderParams
    output_tokens: Tensor  # (n_out, d)
    step: int = 0
    # Adam slots keyed by parameter name
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    @property
    def channels(self):
        return self.prototypes.shape[1]

    def named_parameters(self) -> list[tuple[str, str, Tensor]]:
        """(group, name, tensor) for every parameter, frozen ones included, in a fixed order."""
        out = [("prototypes", "prototypes", self.prototypes)]
        for group, items in self.prompt.named_parameters().items():
            out += [(group, name, t) for name, t in items]
        out += [("decoder", f"decoder.{name}", t) for name, t in self.decoder.named_parameters()]
        out.append(("output_tokens", "output_tokens", self.output_tokens))
        out += [("polarity", name, t) for name, t in self.polarity.named_parameters()]
        return out

    def trainable(self, fixed_prototypes=False):
        return [
            (g, n, t)
            for g, n, t in self.named_parameters()
            if g in TRAINABLE_GROUPS and not (fixed_prototypes and g == "prototypes")
        ]

    def frozen(self):
        return [(g, n, t) for g, n, t in self.named_parameters() if g in FROZEN_GROUPS]

    def census(self) -> dict[str, int]:
        """Parameter counts per group."""
        counts: dict[str, int] = {}
        for group, _, t in self.named_parameters():
            counts[group] = counts.get(group, 0) + t.size
        return counts

    def meta(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "channels": self.channels,
            "n_tokens": self.prompt.n_tokens,
            "num_layers": len(self.decoder.layers),
            "heads": self.decoder.heads,
            "upscale": self.decoder.upscale,
        }


def init_model(config: TrainConfig) -> ModelState:
    """Seeded initialisation: prototypes and polarity ~ N(0, 1), weights Xavier-uniform, biases zero."""
    config.validate()
    rng = np.random.default_rng([config.seed, 0])
    d = config.channels
    prototypes = Tensor(rng.standard_normal((config.num_classes, d)).astype(np.float32), requires_grad=True)
    polarity = PolarityEmbeddings.init(rng, d)
    prompt = PromptMlpParams.init(rng, d, config.r_dense, config.r_sparse, config.n_tokens)
    decoder = DecoderParams.init(
        rng, d, num_layers=config.num_layers, heads=config.heads, upscale=config.upscale,
        head_dim=config.head_dim or None,
    )
    tokens = init_output_tokens(rng, config.n_output_tokens, d)
    return ModelState(prototypes, prompt, polarity, decoder, tokens)


@dataclass
class ForwardResult:
    logits: Tensor  # (..., u*h, u*w)
    similarity: Tensor  # (..., C, h, w)
    dense: Tensor
    sparse: Tensor


def forward(state: ModelState, embeddings, class_ids, record=None) -> ForwardResult:
    """Class-prompted mask logits for one embedding ``(h, w, d)`` or a stack ``(N, h, w, d)``."""
    sim = compute_similarity(embeddings, state.prototypes)
    activated = activate_features(embeddings, sim)
    dense = encode_dense(select_class(activated, class_ids), state.prompt)
    sparse = encode_sparse(activated, class_ids, state.prompt, state.polarity)
    logits = decode_mask(embeddings, dense, sparse, state.output_tokens, state.decoder, record)
    return ForwardResult(logits, sim, dense, sparse)


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: ModelState, path):
    entries = [(name, group, t.data) for group, name, t in state.named_parameters()]
    data.write_checkpoint(path, entries, state.step, state.meta())


def load_checkpoint(path) -> ModelState:
    entries, step, meta = data.read_checkpoint(path)
    try:
        arrays = {name: arr for name, _group, arr in entries}
        d = int(meta["channels"])
        config = TrainConfig(
            num_classes=int(meta["num_classes"]),
            channels=d,
            n_tokens=int(meta["n_tokens"]),
            r_dense=arrays["f_dense.weight"].shape[1],
            r_sparse=arrays["f_sparse.weight"].shape[1],
            num_layers=int(meta["num_layers"]),
            heads=int(meta["heads"]),
            upscale=int(meta["upscale"]),
            head_dim=arrays["decoder.pixel_proj.weight"].shape[1],
            n_output_tokens=arrays["output_tokens"].shape[0],
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint metadata incomplete: {exc}") from None
    try:
        state = init_model(config)
    except ConfigError as exc:
        raise FormatError(f"checkpoint describes an invalid model: {exc}") from None
    params = state.named_parameters()
    if sorted(n for _, n, _ in params) != sorted(arrays):
        raise FormatError("checkpoint parameter names do not match the model layout")
    for _, name, t in params:
        if arrays[name].shape != t.shape:
            raise FormatError(f"{name}: shape {arrays[name].shape} != expected {t.shape}")
        t.data = arrays[name].copy()
    state.step = step
    return state

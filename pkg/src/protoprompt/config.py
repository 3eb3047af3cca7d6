"""Flat ``key=value`` configuration shared by every CLI subcommand.

One file configures both the synthetic generator and training. A key may
belong to both (``seed``, ``num_classes``, ``channels``). Unknown keys are
rejected. Serialisation is canonical (sorted keys, ``repr``-stable values), so
parse -> serialise -> parse is a fixed point.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class SynthConfig:
    num_classes: int = 3
    height: int = 8
    width: int = 8
    channels: int = 16
    samples: int = 64
    eval_samples: int = 16
    shapes_min: int = 1
    shapes_max: int = 3
    snr: float = 4.0
    mask_scale: int = 4
    seed: int = 7

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.height < 4 or self.width < 4:
            raise ConfigError("height and width must be >= 4")
        if self.channels < 1 or self.samples < 0 or self.eval_samples < 0 or self.mask_scale < 1:
            raise ConfigError("channels, mask_scale must be positive; sample counts non-negative")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ConfigError("need 1 <= shapes_min <= shapes_max")
        if not self.snr > 0:
            raise ConfigError("snr must be positive")
        return self


@dataclass
class TrainConfig:
    num_classes: int = 3
    channels: int = 16
    lr: float = 1e-3
    batch_size: int = 32
    max_steps: int = 500
    tau: float = 0.07
    n_tokens: int = 2
    r_dense: int = 128
    r_sparse: int = 128
    num_layers: int = 2
    heads: int = 1
    upscale: int = 4
    head_dim: int = 0  # 0 selects channels // 2
    n_output_tokens: int = 1
    seed: int = 7
    pcl_enabled: bool = True
    fixed_prototypes: bool = False
    train_manifest: str = ""
    eval_manifest: str = ""
    out_dir: str = ""

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if min(self.num_classes, self.channels, self.n_tokens, self.r_dense, self.r_sparse,
               self.heads, self.upscale, self.n_output_tokens) < 1 or self.num_layers < 0:
            raise ConfigError("model sizes must be positive")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        return self


_TYPES = {}
for _cls in (SynthConfig, TrainConfig):
    for _f in fields(_cls):
        _TYPES[_f.name] = _f.type


def _parse_value(key, raw):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"unknown config key: {key}")
        if key in values:
            raise ConfigError(f"duplicate config key: {key}")
        values[key] = _parse_value(key, raw)
    return values


def build_configs(values: dict) -> tuple[SynthConfig, TrainConfig]:
    synth = SynthConfig(**{k: v for k, v in values.items() if k in SynthConfig.__dataclass_fields__})
    train = TrainConfig(**{k: v for k, v in values.items() if k in TrainConfig.__dataclass_fields__})
    return synth, train


def load_config(path) -> tuple[SynthConfig, TrainConfig]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build_configs(parse_config_text(text))


def serialize_config(values: dict) -> str:
    return "".join(f"{k}={_format_value(values[k])}\n" for k in sorted(values))


def config_values(*configs) -> dict:
    out = {}
    for cfg in configs:
        out.update(dataclasses.asdict(cfg))
    return out

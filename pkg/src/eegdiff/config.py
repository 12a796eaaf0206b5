"""Run configuration: nested dataclasses exposed as flat ``section.key`` names."""

from __future__ import annotations

import dataclasses
import json
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal import CorpusSpec, PreprocessConfig


@dataclass
class SignalConfig(PreprocessConfig):
    token_size: int = 4


@dataclass
class MsmConfig:
    d_model: int = 128
    depth: int = 4
    heads: int = 4
    dec_dim: int = 64
    dec_depth: int = 2
    dec_heads: int = 4
    mask_ratio: float = 0.75
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    warmup_steps: int = 100
    distance_bias: bool = True  # per-head linear attention penalty on token distance
    grad_clip: float = 1.0


@dataclass
class AutoencoderConfig:
    identity: bool = False
    width: int = 32
    latent_channels: int = 4
    steps: int = 400
    batch_size: int = 16
    lr: float = 2e-3


@dataclass
class ImageEncoderConfig:
    width: int = 16
    embed_dim: int = 64
    steps: int = 300
    batch_size: int = 32
    lr: float = 2e-3


@dataclass
class ProbeConfig:
    width: int = 24
    steps: int = 300
    batch_size: int = 32
    lr: float = 2e-3


@dataclass
class DiffusionConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.06  # terminal alpha_bar ~2e-3 so sampling starts near pure noise
    channels: int = 64
    groups: int = 8
    context_dim: int = 128
    attn_dim: int = 64
    attn_heads: int = 1
    warmup_steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3


@dataclass
class FinetuneConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 1e-3
    lambda_clip: float = 1.0
    clip: bool = True
    groups: str = "E+A"
    pooling: str = "mean"
    grad_clip: float = 1.0


@dataclass
class EvalConfig:
    repeats: int = 1
    unconditional_samples: int = 256


@dataclass
class RunConfig:
    seed: int = 0
    data: CorpusSpec = field(default_factory=CorpusSpec)
    signal: SignalConfig = field(default_factory=SignalConfig)
    msm: MsmConfig = field(default_factory=MsmConfig)
    ae: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    image_encoder: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # ----------------------------------------------------------- flat view
    def to_flat(self) -> dict[str, typing.Any]:
        flat: dict[str, typing.Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    v = getattr(value, sub.name)
                    flat[f"{f.name}.{sub.name}"] = list(v) if isinstance(v, tuple) else v
            else:
                flat[f.name] = value
        return flat

    @classmethod
    def keys(cls) -> list[str]:
        return list(cls().to_flat())

    def update(self, flat: dict[str, typing.Any]) -> "RunConfig":
        """Return a copy with ``flat`` keys applied; unknown keys raise KeyError."""
        new = dataclasses.replace(
            self, **{f.name: dataclasses.replace(getattr(self, f.name))
                     for f in dataclasses.fields(self) if dataclasses.is_dataclass(getattr(self, f.name))}
        )
        for key, raw in flat.items():
            section, _, name = key.partition(".")
            if not name:
                if key != "seed":
                    raise KeyError(f"unknown config key {key!r}")
                new.seed = int(_coerce(raw, int))
                continue
            target = getattr(new, section, None)
            if not dataclasses.is_dataclass(target):
                raise KeyError(f"unknown config key {key!r}")
            hints = typing.get_type_hints(type(target))
            if name not in hints:
                raise KeyError(f"unknown config key {key!r}")
            setattr(target, name, _coerce(raw, hints[name]))
        return new

    @classmethod
    def from_flat(cls, flat: dict[str, typing.Any]) -> "RunConfig":
        return cls().update(flat)

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ValueError("config file must hold a JSON object of flat keys")
        return cls.from_flat(data)


def _coerce(raw, hint):
    origin = typing.get_origin(hint)
    if origin is tuple:
        items = json.loads(raw) if isinstance(raw, str) else raw
        args = typing.get_args(hint)
        return tuple(_coerce(v, args[0]) for v in items)
    if hint is bool:
        if isinstance(raw, str):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if not isinstance(raw, (bool, int)):
            raise ValueError(f"not a boolean: {raw!r}")
        return bool(raw)
    if hint is int:
        if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
            raise ValueError(f"not an integer: {raw!r}")
        return int(raw)
    if hint is float:
        if isinstance(raw, bool):
            raise ValueError(f"not a number: {raw!r}")
        return float(raw)
    if hint is str:
        if not isinstance(raw, str):
            raise ValueError(f"not a string: {raw!r}")
        return raw
    return raw


def desk_config() -> RunConfig:
    return RunConfig()


def derive_seed(root: int, stage: str, counter: int = 0) -> int:
    """Counter-based per-stage seed: identical (root, stage, counter) give identical seeds."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(stage.encode()), counter])
    return int(ss.generate_state(1)[0])


def stage_rng(root: int, stage: str, counter: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stage, counter))

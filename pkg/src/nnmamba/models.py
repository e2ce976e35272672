"""The three networks: segmentation, landmark heatmaps, classification.

They share the stem and residual block code and differ only in where SSM
layers sit and in their heads:

* segmentation: an SSM layer after the residual block of every encoder stage;
* landmark: a single SSM layer, after the residual block of stage 0;
* classification: a single SSM layer right after the strided stem.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import ConvBNReLU, ResBlock, ResMambaBlock
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError, DimensionError
from .functional import global_avg_pool, upsample_trilinear
from .module import Conv3d, Linear, Module
from .ssm import MambaBlock, MambaLayerConfig
from .tensor import Tensor, concat

TASKS = ("segmentation", "classification", "landmark")
_ALIASES = {"seg": "segmentation", "cls": "classification", "landmark": "landmark", "lmk": "landmark"}


def canonical_task(task: str) -> str:
    task = _ALIASES.get(task, task)
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    return task


@dataclass
class ModelConfig:
    task: str = "segmentation"
    in_channels: int = 1
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    state_size: int = 8
    num_classes: int = 4
    num_landmarks: int = 6
    input_spatial: tuple = (32, 32, 32)
    use_mamba: bool = True
    bidirectional: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.task = canonical_task(self.task)
        self.stage_channels = [int(c) for c in self.stage_channels]
        self.input_spatial = tuple(int(s) for s in self.input_spatial)

    def validate(self) -> "ModelConfig":
        if len(self.stage_channels) < 2:
            raise ConfigError("need at least two stages")
        if any(c < 1 for c in self.stage_channels) or self.in_channels < 1 or self.state_size < 1:
            raise ConfigError("channel counts and state size must be positive")
        if len(self.input_spatial) != 3:
            raise ConfigError("input_spatial must have three extents")
        div = 2 ** (len(self.stage_channels) - 1)
        if any(s % div for s in self.input_spatial):
            raise ConfigError(f"input extents {self.input_spatial} must be divisible by {div}")
        if self.task == "classification" and self.num_classes < 2:
            raise ConfigError("classification needs >= 2 classes")
        return self

    @property
    def out_channels(self) -> int:
        return self.num_landmarks if self.task == "landmark" else self.num_classes

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


class EncoderDecoder(Module):
    """Residual encoder + convolutional decoder with concatenated skips."""

    def __init__(self, cfg: ModelConfig, mamba_stages, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        ch = cfg.stage_channels
        self.stem = ConvBNReLU(cfg.in_channels, ch[0], rng, dtype=dtype)
        self.encoder = [
            ResMambaBlock(ch[max(i - 1, 0)], ch[i], rng, stride=1 if i == 0 else 2, state_size=cfg.state_size,
                          use_mamba=cfg.use_mamba and i in mamba_stages, bidirectional=cfg.bidirectional,
                          dtype=dtype)
            for i in range(len(ch))
        ]
        # decoder[j] merges stage (S-1-j) into stage (S-2-j)
        self.decoder = [
            ConvBNReLU(ch[i] + ch[i - 1], ch[i - 1], rng, dtype=dtype) for i in range(len(ch) - 1, 0, -1)
        ]
        self.head = Conv3d(ch[0], cfg.out_channels, 1, rng, padding=0, bias=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        _check_input(self.cfg, x)
        x = self.stem(x)
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
        for j, block in enumerate(self.decoder):
            skip = skips[-2 - j]
            x = block(concat([upsample_trilinear(x), skip], axis=1))
        return self.head(x)


class Classifier(Module):
    """Strided stem -> (SSM layer) -> residual stages -> global mean pool -> linear."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        ch = cfg.stage_channels
        self.stem = ConvBNReLU(cfg.in_channels, ch[0], rng, stride=2, dtype=dtype)
        mcfg = MambaLayerConfig(ch[0], cfg.state_size, bidirectional=cfg.bidirectional)
        self.mamba = MambaBlock(mcfg, rng, dtype=dtype) if cfg.use_mamba else None
        self.stages = [
            ResBlock(ch[max(i - 1, 0)], ch[i], rng, stride=1 if i == 0 else 2, dtype=dtype) for i in range(len(ch))
        ]
        self.fc = Linear(ch[-1], cfg.num_classes, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        _check_input(self.cfg, x)
        x = self.stem(x)
        if self.mamba is not None:
            x = x + self.mamba(x)
        for block in self.stages:
            x = block(x)
        return self.fc(global_avg_pool(x))


def _check_input(cfg: ModelConfig, x: Tensor):
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected input [N, {cfg.in_channels}, D, H, W], got {x.shape}")
    div = 2 ** (len(cfg.stage_channels) - 1)
    if any(s % div for s in x.shape[2:]):
        raise ConfigError(f"spatial extents {x.shape[2:]} must be divisible by {div}")


def build_seg_model(cfg: ModelConfig, seed: int = 0) -> EncoderDecoder:
    cfg.validate()
    return EncoderDecoder(cfg, set(range(len(cfg.stage_channels))), np.random.default_rng(seed))


def build_landmark_model(cfg: ModelConfig, seed: int = 0) -> EncoderDecoder:
    cfg.validate()
    return EncoderDecoder(cfg, {0}, np.random.default_rng(seed))


def build_cls_model(cfg: ModelConfig, seed: int = 0) -> Classifier:
    cfg.validate()
    return Classifier(cfg, np.random.default_rng(seed))


def build_model(cfg: ModelConfig, seed: int = 0) -> Module:
    builder = {
        "segmentation": build_seg_model,
        "landmark": build_landmark_model,
        "classification": build_cls_model,
    }[cfg.task]
    return builder(cfg, seed)


def mamba_layers(model: Module) -> list[tuple[str, MambaBlock]]:
    """``(qualified name, layer)`` for every SSM layer, in forward order."""
    return [(name, m) for name, m in model.named_modules() if isinstance(m, MambaBlock)]


def mamba_placement(model: Module) -> list[str]:
    """Human-readable placement: ``"stage0"``, ``"stage2"``, ``"after_stem"``..."""
    out = []
    for name, _ in mamba_layers(model):
        if name.startswith("encoder."):
            out.append("stage" + name.split(".")[1])
        elif name == "mamba":
            out.append("after_stem")
        else:  # pragma: no cover
            out.append(name)
    return out


def forward(model: Module, batch) -> Tensor:
    return model(batch if isinstance(batch, Tensor) else Tensor(batch))


def parameter_count(model: Module) -> int:
    return model.parameter_count()


def save_model(path, model: Module) -> None:
    save_tensors(path, model.state_dict())


def load_model(path, cfg: ModelConfig) -> Module:
    model = build_model(cfg)
    model.load_state_dict(load_tensors(path))
    return model

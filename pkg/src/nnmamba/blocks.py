"""Residual 3-d convolution blocks and the residual block + SSM composite."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .module import BatchNorm3d, Conv3d, Module
from .ssm import MambaBlock, MambaLayerConfig
from .tensor import Tensor, relu


class ConvBNReLU(Module):
    def __init__(self, in_channels, out_channels, rng, kernel_size=3, stride=1, dtype=np.float32):
        super().__init__()
        self.conv = Conv3d(in_channels, out_channels, kernel_size, rng, stride=stride, dtype=dtype)
        self.bn = BatchNorm3d(out_channels, dtype=dtype)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))


class ResBlock(Module):
    """``relu(bn2(conv2(relu(bn1(conv1(x))))) + proj(x))``.

    ``conv1`` carries the stride. ``proj`` is a 1x1x1 conv + BN, present only
    when the channel count or the resolution changes.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, stride: int = 1,
                 dtype=np.float32):
        super().__init__()
        self.conv1 = Conv3d(in_channels, out_channels, 3, rng, stride=stride, dtype=dtype)
        self.bn1 = BatchNorm3d(out_channels, dtype=dtype)
        self.conv2 = Conv3d(out_channels, out_channels, 3, rng, dtype=dtype)
        self.bn2 = BatchNorm3d(out_channels, dtype=dtype)
        if in_channels != out_channels or stride != 1:
            self.proj = Conv3d(in_channels, out_channels, 1, rng, stride=stride, padding=0, dtype=dtype)
            self.proj_bn = BatchNorm3d(out_channels, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def shortcut(self, x: Tensor) -> Tensor:
        return x if self.proj is None else self.proj_bn(self.proj(x))

    def forward(self, x: Tensor) -> Tensor:
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return relu(y + self.shortcut(x))


class ResMambaBlock(Module):
    """Residual block followed by an SSM layer with a bypass: ``r + mamba(r)``."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, stride: int = 1,
                 state_size: int = 8, use_mamba: bool = True, bidirectional: bool = False, dtype=np.float32):
        super().__init__()
        self.res = ResBlock(in_channels, out_channels, rng, stride=stride, dtype=dtype)
        cfg = MambaLayerConfig(out_channels, state_size, bidirectional=bidirectional)
        self.mamba = MambaBlock(cfg, rng, dtype=dtype) if use_mamba else None

    def forward(self, x: Tensor) -> Tensor:
        r = self.res(x)
        return r if self.mamba is None else r + self.mamba(r)


def res_block(x: Tensor, block: ResBlock) -> Tensor:
    return block(x)


def res_mamba_block(x: Tensor, block: ResMambaBlock) -> Tensor:
    return block(x)


def batchnorm3d(x: Tensor, bn: BatchNorm3d, mode: str = "train") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return F.batch_norm(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, mode == "train",
                        bn.momentum, bn.eps)


maxpool3d = F.max_pool3d
upsample_trilinear = F.upsample_trilinear

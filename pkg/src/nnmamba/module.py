"""Minimal layer containers: parameter discovery, buffers, train/eval mode."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import DimensionError
from .tensor import Tensor, matmul


def Parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Base class. Tensors with ``requires_grad`` set as attributes are parameters,
    ``Module`` attributes (or lists of modules) are children, and names listed
    in ``_buffer_names`` are persistent non-trainable numpy arrays."""

    _buffer_names: tuple = ()

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield (f"{prefix}.{name}" if prefix else name), getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {name for name, _ in self.named_buffers()}
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()
        for mod_name, m in self.named_modules():
            for name in m._buffer_names:
                key = f"{mod_name}.{name}" if mod_name else name
                setattr(m, name, np.asarray(state[key]).copy())


class Linear(Module):
    """``y = x @ W (+ b)`` on the last axis; ``W`` is ``[in, out]``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_features, out_features)), dtype)
        self.bias = Parameter(rng.uniform(-bound, bound, size=out_features), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects {self.weight.shape[0]} input features, got {x.shape}")
        lead = x.shape[:-1]
        y = matmul(x.reshape(-1, x.shape[-1]), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(lead + (y.shape[-1],))


class Conv3d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = False, dtype=np.float32):
        super().__init__()
        k = kernel_size
        fan_in = in_channels * k**3
        # He-normal for ReLU nets
        std = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(rng.normal(0.0, std, size=(out_channels, in_channels, k, k, k)), dtype)
        self.bias = Parameter(np.zeros(out_channels), dtype) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm3d(Module):
    """Batch normalization with running statistics (momentum 0.1, eps 1e-5 by default)."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = Parameter(np.ones(channels), dtype)
        self.beta = Parameter(np.zeros(channels), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)

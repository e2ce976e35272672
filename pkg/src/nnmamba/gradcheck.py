"""Finite-difference verification of every differentiable building block.

Each case builds a small float64 problem from a seed, contracts the output
with a fixed random weight to get a scalar, and compares the tape gradient of
every input against central differences, element by element.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from . import tensor as T
from .blocks import ResBlock, ResMambaBlock
from .module import BatchNorm3d
from .ssm import MambaBlock, MambaLayerConfig, SSMParams, scan_core, selective_scan
from .tensor import Tensor, no_grad
from .training import ce_cls_loss, dice_ce_loss, heatmap_mse_loss

DEFAULT_TOL = 1e-4
DEFAULT_EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    seed: int
    rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.rel_error <= self.tol)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``, 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check(fn: Callable[[], Tensor], inputs, rng: np.random.Generator, eps: float = DEFAULT_EPS) -> float:
    """Largest relative error over ``inputs`` between tape and finite-difference gradients.

    ``fn`` recomputes the output from the current contents of ``inputs``.
    """
    out = fn()
    weight = rng.normal(size=out.shape)

    def scalar() -> float:
        with no_grad():
            return float(np.sum(fn().data * weight))

    for t in inputs:
        t.grad = None
    T.backward(T.sum(fn() * weight), inputs)
    worst = 0.0
    for t in inputs:
        worst = max(worst, rel_error(t.grad, numeric_grad(scalar, t.data, eps)))
    return worst


def _leaf(rng, *shape, low=None, high=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _params(module):
    return module.parameters()


# Each builder takes an rng and returns (fn, inputs).

def _unary(op, low=None, high=None):
    def build(rng):
        x = _leaf(rng, 3, 4, low=low, high=high)
        return (lambda: op(x)), [x]
    return build


def _binary(op, low=None, high=None, broadcast=False):
    def build(rng):
        a = _leaf(rng, 3, 4, low=low, high=high)
        b = _leaf(rng, 4 if broadcast else 3, *(() if broadcast else (4,)), low=low, high=high)
        return (lambda: op(a, b)), [a, b]
    return build


def _matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    return (lambda: T.matmul(a, b)), [a, b]


def _getitem(rng):
    x = _leaf(rng, 4, 5)
    idx = np.array([0, 2, 2, 3])
    return (lambda: x[idx, 1:4]), [x]


def _concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    return (lambda: T.concat([a, b], axis=1)), [a, b]


def _conv(stride, padding, bias):
    def build(rng):
        x = _leaf(rng, 2, 2, 4, 4, 4)
        w = _leaf(rng, 3, 2, 3, 3, 3)
        b = _leaf(rng, 3) if bias else None
        inputs = [x, w] + ([b] if bias else [])
        return (lambda: F.conv3d(x, w, b, stride=stride, padding=padding)), inputs
    return build


def _batch_norm(training):
    def build(rng):
        x = _leaf(rng, 2, 3, 2, 2, 3)
        bn = BatchNorm3d(3, dtype=np.float64)
        bn.gamma.data = rng.uniform(0.5, 1.5, size=3)
        bn.beta.data = rng.normal(size=3)
        bn.running_mean[:] = rng.normal(size=3)
        bn.running_var[:] = rng.uniform(0.5, 2.0, size=3)
        bn.train(training)
        return (lambda: bn(x)), [x, bn.gamma, bn.beta]
    return build


def _max_pool(rng):
    x = _leaf(rng, 1, 2, 4, 4, 4)
    return (lambda: F.max_pool3d(x, 2)), [x]


def _upsample(rng):
    x = _leaf(rng, 1, 2, 2, 3, 2)
    return (lambda: F.upsample_trilinear(x)), [x]


def _scan_core(rng):
    B, L, E, N = 2, 9, 3, 2
    u = _leaf(rng, B, L, E)
    delta = _leaf(rng, B, L, E, low=0.05, high=1.0)
    A = _leaf(rng, E, N, low=-2.0, high=-0.2)
    Bm, Cm = _leaf(rng, B, L, N), _leaf(rng, B, L, N)
    return (lambda: scan_core(u, delta, A, Bm, Cm, chunk=4)), [u, delta, A, Bm, Cm]


def _selective_scan(rng):
    p = SSMParams(3, 2, rng, dtype=np.float64)
    u = _leaf(rng, 7, 3)
    return (lambda: selective_scan(u, p, chunk=3)), [u] + _params(p)


def _wake(blk: MambaBlock, rng):
    # A zero output projection hides every upstream gradient, and the tiny
    # initial step sizes make the A gradients too small to difference reliably.
    blk.out_proj.weight.data = rng.normal(size=blk.out_proj.weight.shape)
    blk.ssm.proj_delta.bias.data = rng.uniform(-1.0, 1.0, size=blk.ssm.proj_delta.bias.shape)


def _mamba(bidirectional):
    def build(rng):
        blk = MambaBlock(MambaLayerConfig(2, state_size=3, bidirectional=bidirectional), rng, dtype=np.float64)
        _wake(blk, rng)
        x = _leaf(rng, 1, 2, 2, 2, 3)
        return (lambda: blk(x)), [x] + _params(blk)
    return build


def _res_block(in_ch, out_ch, stride):
    def build(rng):
        blk = ResBlock(in_ch, out_ch, rng, stride=stride, dtype=np.float64)
        x = _leaf(rng, 2, in_ch, 4, 4, 4)
        return (lambda: blk(x)), [x] + _params(blk)
    return build


def _res_mamba_block(rng):
    blk = ResMambaBlock(2, 2, rng, stride=1, state_size=2, dtype=np.float64)
    _wake(blk.mamba, rng)
    x = _leaf(rng, 2, 2, 2, 2, 2)
    return (lambda: blk(x)), [x] + _params(blk)


def _dice_ce(rng):
    logits = _leaf(rng, 2, 3, 2, 3, 2)
    target = rng.integers(0, 3, size=(2, 2, 3, 2))
    return (lambda: dice_ce_loss(logits, target)), [logits]


def _heatmap_mse(rng):
    pred = _leaf(rng, 1, 2, 3, 3, 3)
    target = rng.uniform(size=(1, 2, 3, 3, 3))
    return (lambda: heatmap_mse_loss(pred, target)), [pred]


def _ce_cls(rng):
    logits = _leaf(rng, 4, 3)
    labels = rng.integers(0, 3, size=4)
    return (lambda: ce_cls_loss(logits, labels)), [logits]


def _power(rng):
    x = _leaf(rng, 3, 4, low=0.5, high=2.0)
    return (lambda: T.power(x, 2.5)), [x]


def _pad(rng):
    x = _leaf(rng, 2, 3)
    return (lambda: T.pad(x, ((1, 0), (2, 1)))), [x]


CASES: dict[str, Callable] = {
    "add": _binary(T.add, broadcast=True),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul, broadcast=True),
    "div": _binary(T.div, low=0.5, high=2.0),
    "neg": _unary(T.neg),
    "power": _power,
    "exp": _unary(T.exp),
    "log": _unary(T.log, 0.2, 3.0),
    "sqrt": _unary(T.sqrt, 0.2, 3.0),
    "sigmoid": _unary(T.sigmoid),
    "softplus": _unary(T.softplus),
    "silu": _unary(T.silu),
    "relu": _unary(T.relu),
    "matmul": _matmul,
    "sum": _unary(lambda x: T.sum(x, axis=1)),
    "mean": _unary(lambda x: T.mean(x, axis=0, keepdims=True)),
    "logsumexp": _unary(lambda x: T.logsumexp(x, axis=1)),
    "log_softmax": _unary(lambda x: T.log_softmax(x, axis=0)),
    "softmax": _unary(lambda x: T.softmax(x, axis=1)),
    "reshape": _unary(lambda x: T.reshape(x, (2, 6))),
    "transpose": _unary(lambda x: T.transpose(x, (1, 0))),
    "getitem": _getitem,
    "slice_axis": _unary(lambda x: T.slice_axis(x, 1, 1, 3)),
    "concat": _concat,
    "pad": _pad,
    "broadcast_to": _unary(lambda x: T.broadcast_to(x, (2, 3, 4))),
    "flip": _unary(lambda x: T.flip(x, 1)),
    "conv3d": _conv(1, 1, False),
    "conv3d_bias_stride2": _conv(2, 1, True),
    "conv3d_valid": _conv(1, 0, False),
    "batch_norm_train": _batch_norm(True),
    "batch_norm_eval": _batch_norm(False),
    "max_pool3d": _max_pool,
    "upsample_trilinear": _upsample,
    "scan_core": _scan_core,
    "selective_scan": _selective_scan,
    "mamba_block": _mamba(False),
    "mamba_block_bidirectional": _mamba(True),
    "res_block": _res_block(2, 2, 1),
    "res_block_projection": _res_block(2, 3, 2),
    "res_mamba_block": _res_mamba_block,
    "dice_ce_loss": _dice_ce,
    "heatmap_mse_loss": _heatmap_mse,
    "ce_cls_loss": _ce_cls,
}


def run_case(name: str, seed: int, tol: float = DEFAULT_TOL, eps: float = DEFAULT_EPS) -> CheckResult:
    rng = np.random.default_rng(seed)
    fn, inputs = CASES[name](rng)
    return CheckResult(name, seed, check(fn, inputs, rng, eps), tol)


def run_suite(names=None, seeds=range(20), tol: float = DEFAULT_TOL, progress=None) -> list[CheckResult]:
    results = []
    for name in names or CASES:
        for seed in seeds:
            r = run_case(name, seed, tol)
            results.append(r)
            if progress is not None:
                progress(r)
    return results

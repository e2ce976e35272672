"""Selective state-space layer.

Continuous dynamics ``x'(t) = A x(t) + B u(t)``, ``y(t) = C x(t)`` with a
diagonal, strictly negative ``A``. Per token, ``B_t``, ``C_t`` and the step
size ``delta_t`` are projections of the input, the system is discretized
(zero-order hold on ``A``, Euler on ``B``) and the recurrence

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t
    y_t = <C_t, h_t> + D * u_t

is evaluated with the chunked scan from :mod:`nnmamba.kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError
from .functional import from_tokens, to_tokens
from .module import Linear, Module, Parameter
from .tensor import Tensor, _check_finite, _record, as_tensor, exp, flip, neg, silu, softplus


@dataclass
class MambaLayerConfig:
    channels: int
    state_size: int = 8
    expand_factor: int = 2
    flatten_order: str = "raster_DHW"
    bidirectional: bool = False

    def __post_init__(self):
        if self.channels < 1 or self.state_size < 1 or self.expand_factor < 1:
            raise ValueError("channels, state_size and expand_factor must be positive")
        if self.flatten_order != "raster_DHW":
            raise ValueError(f"unsupported flatten order {self.flatten_order!r}")

    @property
    def inner(self) -> int:
        return self.channels * self.expand_factor


def zoh_discretize(A, B, delta):
    """Return ``(A_bar, B_bar) = (exp(delta*A), delta*B)``.

    ``A`` is the diagonal ``[E, N]``, ``delta`` is ``[..., E]`` and ``B`` is
    ``[..., N]``; both results are ``[..., E, N]``. Plain arrays or tensors.
    """
    if isinstance(A, Tensor) or isinstance(B, Tensor) or isinstance(delta, Tensor):
        A, B, delta = as_tensor(A), as_tensor(B), as_tensor(delta)
        d = delta.reshape(delta.shape + (1,))
        b = B.reshape(B.shape[:-1] + (1, B.shape[-1]))
        return exp(d * A), d * b
    A, B, delta = np.asarray(A), np.asarray(B), np.asarray(delta)
    d = delta[..., None]
    return np.exp(d * A), d * B[..., None, :]


def scan_core(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, chunk: int = kernels.CHUNK) -> Tensor:
    """Fused discretize + scan + readout, one tape entry.

    Shapes: ``u, delta: [B, L, E]``, ``A: [E, N]``, ``Bm, Cm: [B, L, N]``.
    Returns ``y: [B, L, E]`` without the skip term.
    """
    nb, L, E = u.shape
    N = A.shape[1]
    if L == 0:
        raise ValueError("selective scan over an empty sequence")
    if delta.shape != u.shape or A.shape != (E, N) or Bm.shape != (nb, L, N) or Cm.shape != (nb, L, N):
        raise DimensionError(
            f"scan_core shapes: u {u.shape}, delta {delta.shape}, A {A.shape}, B {Bm.shape}, C {Cm.shape}"
        )
    _check_finite(u.data, delta.data, A.data, Bm.data, Cm.data)
    ud, dd, Ad, Bd, Cd = u.data, delta.data, A.data, Bm.data, Cm.data
    y, h = kernels.selective_scan_fwd(ud, dd, Ad, Bd, Cd, chunk)

    def backward(gy):
        return kernels.selective_scan_bwd(gy, ud, dd, Ad, Bd, Cd, h, chunk)

    return _record(y.astype(ud.dtype, copy=False), (u, delta, A, Bm, Cm), backward)


class SSMParams(Module):
    """Parameters of one selective SSM over ``channels`` lanes with state size ``N``.

    ``A = -exp(A_log)`` starts at ``-(n + 1)`` for ``n = 0..N-1``; the step-size
    bias starts so that ``softplus(bias)`` is log-uniform in ``[dt_min, dt_max]``.
    """

    def __init__(self, channels: int, state_size: int, rng: np.random.Generator, dtype=np.float32,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        self.channels = channels
        self.state_size = state_size
        n = np.arange(1, state_size + 1, dtype=np.float64)
        self.A_log = Parameter(np.log(np.tile(n, (channels, 1))), dtype)
        self.proj_B = Linear(channels, state_size, rng, bias=False, dtype=dtype)
        self.proj_C = Linear(channels, state_size, rng, bias=False, dtype=dtype)
        self.proj_delta = Linear(channels, channels, rng, bias=True, dtype=dtype)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
        # inverse softplus
        self.proj_delta.bias.data = (dt + np.log(-np.expm1(-dt))).astype(dtype)
        self.D_skip = Parameter(np.ones(channels), dtype)

    def A(self) -> Tensor:
        return neg(exp(self.A_log))


def selective_scan(u: Tensor, params: SSMParams, chunk: int = kernels.CHUNK) -> Tensor:
    """Run the selective SSM over ``u``: ``[L, C]`` or ``[batch, L, C]``."""
    u = as_tensor(u)
    squeeze = u.ndim == 2
    if squeeze:
        u = u.reshape((1,) + u.shape)
    if u.ndim != 3:
        raise DimensionError(f"selective_scan expects [L, C] or [B, L, C], got {u.shape}")
    if u.shape[1] == 0:
        raise ValueError("selective scan over an empty sequence")
    if u.shape[2] != params.channels:
        raise DimensionError(f"selective_scan: input has {u.shape[2]} channels, params expect {params.channels}")
    delta = softplus(params.proj_delta(u))
    y = scan_core(u, delta, params.A(), params.proj_B(u), params.proj_C(u), chunk) + u * params.D_skip
    return y.reshape(y.shape[1:]) if squeeze else y


class MambaBlock(Module):
    """Token-mixing SSM block applied to a 5-d feature map.

    Flatten (raster D, H, W) -> linear expand into value and gate -> SiLU on
    both -> selective scan on the value -> gate multiply -> linear back to
    ``channels``. The output projection starts at zero, so a residual wrapper
    is the identity at initialization.
    """

    def __init__(self, cfg: MambaLayerConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        E = cfg.inner
        self.in_proj = Linear(cfg.channels, 2 * E, rng, bias=False, dtype=dtype)
        self.ssm = SSMParams(E, cfg.state_size, rng, dtype=dtype)
        self.out_proj = Linear(E, cfg.channels, rng, bias=False, dtype=dtype)
        self.out_proj.weight.data[...] = 0

    def mix(self, tokens: Tensor) -> Tensor:
        """``[B, L, C] -> [B, L, C]`` token mixing."""
        E = self.cfg.inner
        xz = self.in_proj(tokens)
        v = silu(xz[..., :E])
        z = silu(xz[..., E:])
        y = selective_scan(v, self.ssm)
        if self.cfg.bidirectional:
            back = flip(selective_scan(flip(v, 1), self.ssm), 1)
            y = (y + back) * 0.5
        return self.out_proj(y * z)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5:
            raise DimensionError(f"MambaBlock expects [N, C, D, H, W], got {x.shape}")
        if x.shape[1] != self.cfg.channels:
            raise DimensionError(f"MambaBlock: input has {x.shape[1]} channels, layer expects {self.cfg.channels}")
        return from_tokens(self.mix(to_tokens(x)), x.shape[2:])


def mamba_block(x: Tensor, block: MambaBlock) -> Tensor:
    return block(x)

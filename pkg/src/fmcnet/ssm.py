"""Selective state-space scan and the multi-granularity block built on it.

A scan treats the voxels of a [C,D,H,W] map as one forward raster
sequence (z-major, then y, then x) and runs a per-channel diagonal linear
recurrence whose step size, input and readout projections all depend on
the current input (zero-order-hold discretization). Parameterization
keeps the recurrence stable: the continuous decay is -exp(decay_log) < 0
and the step size is softplus-positive, so every discrete factor stays in
(0, 1).

The multi-granularity block feeds three dilated depthwise views of the
same local features through independent scans and gates them with one
shared mixing branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .autodiff import NonFiniteError, ShapeError, Tensor
from .module import Module, ModuleList, conv_param, linear_param, parameter, zeros_param
from .ops import (
    add,
    as_tensor,
    channel_linear,
    concat,
    conv3d,
    exp,
    group_norm,
    layer_norm_channels,
    mul,
    pointwise_linear,
    reshape,
    silu,
    softplus,
    state_scan,
    transpose,
)
from .rng import SplitMix64


@dataclass
class MgSsmConfig:
    dilations: tuple[int, int, int] = (1, 2, 3)
    state_dim: int = 8

    def __post_init__(self):
        dils = tuple(int(d) for d in self.dilations)
        if len(set(dils)) != len(dils) or any(d < 1 for d in dils):
            raise ValueError(f"dilations must be distinct and >= 1, got {dils}")
        self.dilations = dils
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")


class ScanParams(Module):
    """Learned parameters of one selective-scan branch."""

    def __init__(self, rng: SplitMix64, channels: int, state_dim: int):
        super().__init__()
        self.channels = channels
        self.state_dim = state_dim
        # log(1..N) spreads the per-state time constants across scales
        self.decay_log = parameter(np.tile(np.log(np.arange(1, state_dim + 1, dtype=np.float64)), (channels, 1)))
        self.skip = parameter(np.ones(channels))
        self.in_proj = linear_param(rng, state_dim, channels)
        self.read_proj = linear_param(rng, state_dim, channels)
        self.step_proj = linear_param(rng, channels, channels)
        self.step_bias = zeros_param(channels)

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteError(f"selective_scan: parameter {name} contains non-finite values")


def selective_scan(u, params: ScanParams) -> Tensor:
    """Run the input-selective recurrence over a [L,C] sequence."""
    u = as_tensor(u)
    if u.ndim != 2 or u.shape[0] < 1:
        raise ShapeError(f"selective_scan: expected a [L,C] sequence with L >= 1, got {tuple(u.shape)}")
    if u.shape[1] != params.channels:
        raise ShapeError(f"selective_scan: sequence has {u.shape[1]} channels, params expect {params.channels}")
    params.check_finite()
    delta = softplus(pointwise_linear(u, params.step_proj, params.step_bias))
    bmat = pointwise_linear(u, params.in_proj)
    cmat = pointwise_linear(u, params.read_proj)
    decay = exp(params.decay_log)
    return state_scan(u, delta, bmat, cmat, decay, params.skip)


def selective_scan_blocked(u, params: ScanParams, block: int) -> Tensor:
    """Parallel-prefix evaluation over fixed-size blocks; forward only.

    Per-block affine maps h -> a*h + b are reduced, prefix-composed, and
    replayed, giving the same outputs as the sequential scan to within
    1e-10. Not differentiable; training uses selective_scan.
    """
    if block < 2:
        raise ValueError(f"block must be >= 2, got {block}")
    u = as_tensor(u)
    params.check_finite()
    ud = np.ascontiguousarray(u.data)
    delta = np.logaddexp(0.0, ud @ params.step_proj.data.T + params.step_bias.data)
    bmat = ud @ params.in_proj.data.T
    cmat = ud @ params.read_proj.data.T
    decay = np.exp(params.decay_log.data)
    y = np.empty_like(ud)
    backend.scan_blocked(ud, delta, bmat, cmat, decay, params.skip.data, block, y)
    return Tensor(y)


def default_norm_groups(channels: int) -> int:
    for g in (4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResBlock(Module):
    """x + (conv -> group_norm -> silu -> conv -> group_norm)(x)."""

    def __init__(self, rng: SplitMix64, channels: int):
        super().__init__()
        self.groups = default_norm_groups(channels)
        self.conv1_w = conv_param(rng, channels, channels, 3)
        self.conv1_b = zeros_param(channels)
        self.conv2_w = conv_param(rng, channels, channels, 3)
        self.conv2_b = zeros_param(channels)

    def __call__(self, x: Tensor) -> Tensor:
        f = group_norm(conv3d(x, self.conv1_w, self.conv1_b), self.groups)
        f = group_norm(conv3d(silu(f), self.conv2_w, self.conv2_b), self.groups)
        return add(x, f)


class VssmBranch(Module):
    """Normalize, mix, activate, scan one granularity view."""

    def __init__(self, rng: SplitMix64, channels: int, state_dim: int):
        super().__init__()
        self.mix_w = linear_param(rng, channels, channels)
        self.mix_b = zeros_param(channels)
        self.scan = ScanParams(rng, channels, state_dim)

    def __call__(self, x: Tensor) -> Tensor:
        c, d, h, w = x.shape
        seq = reshape(transpose(x, (1, 2, 3, 0)), (d * h * w, c))
        seq = silu(pointwise_linear(layer_norm_channels(seq), self.mix_w, self.mix_b))
        out = selective_scan(seq, self.scan)
        return transpose(reshape(out, (d, h, w, c)), (3, 0, 1, 2))


def gate_features(stacked: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Shared mixing branch: 3C -> C pointwise reduction, silu-activated."""
    return silu(channel_linear(stacked, weight, bias))


class MultiGranularityBlock(Module):
    def __init__(self, rng: SplitMix64, channels: int, out_channels: int, config: MgSsmConfig | None = None):
        super().__init__()
        cfg = config or MgSsmConfig()
        self.config = cfg
        self.channels = channels
        self.local = ResBlock(rng, channels)
        self.dw_weights = ModuleList([_Depthwise(rng, channels, d) for d in cfg.dilations])
        self.branches = ModuleList([VssmBranch(rng, channels, cfg.state_dim) for _ in cfg.dilations])
        self.post_w = ModuleList([_ChannelMix(rng, channels, channels) for _ in cfg.dilations])
        self.gate_w = linear_param(rng, channels, len(cfg.dilations) * channels)
        self.gate_b = zeros_param(channels)
        self.fuse_w = linear_param(rng, out_channels, len(cfg.dilations) * channels)
        self.fuse_b = zeros_param(out_channels)

    def granularity_parts(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """(shared gate, per-branch gated outputs) before the final fusion."""
        local = self.local(x)
        views = [dw(local) for dw in self.dw_weights]
        scanned = [branch(v) for branch, v in zip(self.branches, views)]
        gate = gate_features(concat(views, axis=0), self.gate_w, self.gate_b)
        outs = [post(mul(s, gate)) for post, s in zip(self.post_w, scanned)]
        return gate, outs

    def __call__(self, x: Tensor) -> Tensor:
        _, outs = self.granularity_parts(x)
        return channel_linear(concat(outs, axis=0), self.fuse_w, self.fuse_b)


class _Depthwise(Module):
    def __init__(self, rng: SplitMix64, channels: int, dilation: int):
        super().__init__()
        self.dilation = dilation
        self.channels = channels
        self.weight = conv_param(rng, channels, 1, 3)
        self.bias = zeros_param(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, dilation=self.dilation, groups=self.channels)


class _ChannelMix(Module):
    def __init__(self, rng: SplitMix64, out_channels: int, in_channels: int):
        super().__init__()
        self.weight = linear_param(rng, out_channels, in_channels)
        self.bias = zeros_param(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return channel_linear(x, self.weight, self.bias)

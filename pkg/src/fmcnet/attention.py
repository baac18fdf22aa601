"""High-frequency refinement: dual spatial-attention over seven subbands.

The seven high-pass subbands of one decomposition level are summarized by
two pooling paths. The max path amplifies salient responses, the average
path smooths noise; each produces a per-channel, per-voxel attention map
in (0,1) that reweights all seven bands. The 14 reweighted bands are
concatenated and projected to the requested output width.
"""

from __future__ import annotations

import math

from .autodiff import ShapeError, Tensor
from .module import Module, ModuleList, conv_param, linear_param, zeros_param
from .ops import channel_linear, concat, conv3d, group_pool, mul, sigmoid, softmax_channels
from .rng import SplitMix64

N_HIGH_BANDS = 7


def group_count(stage_index: int, channels: int) -> int:
    """Default pooling group count: min(2^stage, C), forced to divide C."""
    if stage_index < 0:
        raise ValueError("stage_index must be >= 0")
    g = min(2**stage_index, channels)
    if channels % g != 0:
        g = math.gcd(g, channels)
    return max(g, 1)


class _BandProjection(Module):
    # Maps one pooled band from its group count back to C channels.
    def __init__(self, rng: SplitMix64, n_groups: int, channels: int):
        super().__init__()
        self.weight = linear_param(rng, channels, n_groups)
        self.bias = zeros_param(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return channel_linear(x, self.weight, self.bias)


class AttentionPath(Module):
    """One pooling path producing a sigmoid attention map over the bands."""

    def __init__(self, rng: SplitMix64, channels: int, n_groups: int, mode: str):
        super().__init__()
        if mode not in ("max", "avg"):
            raise ValueError(f"mode must be 'max' or 'avg', got {mode!r}")
        self.mode = mode
        self.n_groups = n_groups
        self.channels = channels
        self.band_projs = ModuleList([_BandProjection(rng, n_groups, channels) for _ in range(N_HIGH_BANDS)])
        self.mix_weight = conv_param(rng, channels, N_HIGH_BANDS * channels, 3)
        self.mix_bias = zeros_param(channels)

    def attention_map(self, bands: list[Tensor]) -> Tensor:
        _check_bands(bands, self.channels)
        projected = [
            proj(group_pool(band, self.n_groups, self.mode))
            for band, proj in zip(bands, self.band_projs)
        ]
        summary = conv3d(concat(projected, axis=0), self.mix_weight, self.mix_bias)
        return sigmoid(mul(softmax_channels(summary), summary))


class HighFreqRefine(Module):
    def __init__(self, rng: SplitMix64, channels: int, out_channels: int, stage_index: int):
        super().__init__()
        g = group_count(stage_index, channels)
        self.channels = channels
        self.amplify = AttentionPath(rng, channels, g, "max")
        self.denoise = AttentionPath(rng, channels, g, "avg")
        self.out_weight = linear_param(rng, out_channels, 2 * N_HIGH_BANDS * channels)
        self.out_bias = zeros_param(out_channels)

    def weighted_concat(self, bands: list[Tensor]) -> Tensor:
        """The 14C-channel stack of attention-reweighted bands, pre-projection."""
        _check_bands(bands, self.channels)
        amp = self.amplify.attention_map(bands)
        den = self.denoise.attention_map(bands)
        pieces = [mul(amp, band) for band in bands] + [mul(den, band) for band in bands]
        return concat(pieces, axis=0)

    def __call__(self, bands: list[Tensor]) -> Tensor:
        return channel_linear(self.weighted_concat(bands), self.out_weight, self.out_bias)


def _check_bands(bands, channels: int) -> None:
    if len(bands) != N_HIGH_BANDS:
        raise ShapeError(f"expected {N_HIGH_BANDS} high-frequency bands, got {len(bands)}")
    shape = tuple(bands[0].shape)
    for i, b in enumerate(bands):
        if tuple(b.shape) != shape:
            raise ShapeError(f"band {i} has shape {tuple(b.shape)}, expected {shape}")
    if shape[0] != channels:
        raise ShapeError(f"bands have {shape[0]} channels, path was built for {channels}")


def zero_parameters(module: Module) -> None:
    """Zero every parameter in place (test/diagnostic helper)."""
    for p in module.parameters():
        p.data[...] = 0.0

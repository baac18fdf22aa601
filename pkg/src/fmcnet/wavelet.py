"""Orthonormal Haar transform along all three axes of a volume.

One level splits a [C,D,H,W] map into eight half-resolution subbands.
Band names use one letter per axis, first letter = depth (z), second =
height (y), third = width (x); 'l' is the low-pass half, 'h' the
high-pass half. The 2-tap filters are orthonormal, so the transform is
energy preserving and its adjoint is its inverse, which makes the
downsampling exactly invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, make_result
from .ops import as_tensor, channel_linear, concat, narrow, reshape

INV_SQRT2 = float(2.0**-0.5)

BAND_NAMES = ("lll", "llh", "lhl", "lhh", "hll", "hlh", "hhl", "hhh")

# Analysis taps; module-level so the selfcheck fault hook can corrupt one.
_LOW = np.array([INV_SQRT2, INV_SQRT2])
_HIGH = np.array([INV_SQRT2, -INV_SQRT2])


def set_filter_fault(enabled: bool) -> None:
    """Selfcheck hook: knock one low-pass tap off its orthonormal value."""
    _LOW[0] = INV_SQRT2 + (0.01 if enabled else 0.0)


def _split_axis(a: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    even = [slice(None)] * a.ndim
    odd = [slice(None)] * a.ndim
    even[axis] = slice(0, None, 2)
    odd[axis] = slice(1, None, 2)
    e, o = a[tuple(even)], a[tuple(odd)]
    return e * _LOW[0] + o * _LOW[1], e * _HIGH[0] + o * _HIGH[1]


def _merge_axis(lo: np.ndarray, hi: np.ndarray, axis: int) -> np.ndarray:
    # Transpose of _split_axis; equals the inverse for orthonormal taps.
    shape = list(lo.shape)
    shape[axis] *= 2
    out = np.empty(shape)
    even = [slice(None)] * lo.ndim
    odd = [slice(None)] * lo.ndim
    even[axis] = slice(0, None, 2)
    odd[axis] = slice(1, None, 2)
    out[tuple(even)] = lo * _LOW[0] + hi * _HIGH[0]
    out[tuple(odd)] = lo * _LOW[1] + hi * _HIGH[1]
    return out


def _dwt3_data(x: np.ndarray) -> np.ndarray:
    lo_z, hi_z = _split_axis(x, 1)
    quads = []
    for part_z in (lo_z, hi_z):
        lo_y, hi_y = _split_axis(part_z, 2)
        for part_y in (lo_y, hi_y):
            lo_x, hi_x = _split_axis(part_y, 3)
            quads.extend((lo_x, hi_x))
    # quads order matches BAND_NAMES: index = 4*z_high + 2*y_high + x_high
    return np.stack(quads, axis=0)


def _idwt3_data(bands: np.ndarray) -> np.ndarray:
    parts_y = []
    for i in range(0, 8, 2):
        parts_y.append(_merge_axis(bands[i], bands[i + 1], 3))
    parts_z = []
    for i in range(0, 4, 2):
        parts_z.append(_merge_axis(parts_y[i], parts_y[i + 1], 2))
    return _merge_axis(parts_z[0], parts_z[1], 1)


@dataclass
class WaveletSubbands:
    """Eight half-resolution subbands stacked as [8, C, D/2, H/2, W/2]."""

    stacked: Tensor

    def band(self, name: str) -> Tensor:
        idx = BAND_NAMES.index(name)
        one = narrow(self.stacked, 0, idx, 1)
        return reshape(one, self.stacked.shape[1:])

    @property
    def lll(self) -> Tensor:
        return self.band("lll")

    def high_bands(self) -> list[Tensor]:
        return [self.band(n) for n in BAND_NAMES[1:]]

    @property
    def band_shape(self) -> tuple:
        return tuple(self.stacked.shape[1:])


def dwt3(x) -> WaveletSubbands:
    """Decompose a [C,D,H,W] map; every spatial extent must be even and >= 2."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"dwt3: expected [C,D,H,W], got ndim={x.ndim}")
    for ax, name in zip((1, 2, 3), ("depth", "height", "width")):
        extent = x.data.shape[ax]
        if extent < 2 or extent % 2 != 0:
            raise ShapeError(f"dwt3: {name} axis extent {extent} must be even and >= 2 (no implicit padding)")

    def vjp(g):
        return (_idwt3_data(np.ascontiguousarray(g)),)

    return WaveletSubbands(make_result(_dwt3_data(x.data), (x,), vjp, "dwt3"))


def stack_bands(named_bands: dict) -> WaveletSubbands:
    """Assemble subbands from a name -> array mapping, rejecting mismatched shapes."""
    missing = [n for n in BAND_NAMES if n not in named_bands]
    if missing:
        raise ShapeError(f"stack_bands: missing bands {missing}")
    arrays = [np.asarray(named_bands[n], dtype=np.float64) for n in BAND_NAMES]
    shape = arrays[0].shape
    for name, a in zip(BAND_NAMES, arrays):
        if a.shape != shape:
            raise ShapeError(f"stack_bands: band {name} has shape {a.shape}, expected {shape}")
    return WaveletSubbands(Tensor(np.stack(arrays, axis=0)))


def idwt3(bands) -> Tensor:
    """Reassemble the full-resolution map from eight consistent subbands."""
    stacked = bands.stacked if isinstance(bands, WaveletSubbands) else as_tensor(bands)
    if stacked.ndim != 5 or stacked.data.shape[0] != 8:
        raise ShapeError(f"idwt3: expected stacked bands [8,C,d,h,w], got {tuple(stacked.shape)}")

    def vjp(g):
        return (_dwt3_data(np.ascontiguousarray(g)),)

    return make_result(_idwt3_data(stacked.data), (stacked,), vjp, "idwt3")


def wtu(encoder_feature: Tensor, decoder_feature: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Upsample decoder content by fusing it into the encoder's low band.

    The encoder feature is decomposed; its low band and the half-resolution
    decoder feature are concatenated channel-wise and projected back to the
    encoder channel count; the inverse transform of (projected low band,
    original high bands) returns a full-resolution map.
    """
    encoder_feature = as_tensor(encoder_feature)
    decoder_feature = as_tensor(decoder_feature)
    expected = tuple(e // 2 for e in encoder_feature.shape[1:])
    if tuple(decoder_feature.shape[1:]) != expected:
        raise ShapeError(
            f"wtu: decoder feature spatial extents {tuple(decoder_feature.shape[1:])} "
            f"must be exactly half the encoder's, expected {expected}"
        )
    bands = dwt3(encoder_feature)
    fused = concat([bands.lll, decoder_feature], axis=0)
    c_e = encoder_feature.shape[0]
    if weight.shape != (c_e, c_e + decoder_feature.shape[0]):
        raise ShapeError(
            f"wtu: projection must map {c_e + decoder_feature.shape[0]} fused channels "
            f"to {c_e}, got weight shape {tuple(weight.shape)}"
        )
    low = channel_linear(fused, weight, bias)
    low5 = reshape(low, (1, *low.shape))
    high = narrow(bands.stacked, 0, 1, 7)
    return idwt3(concat([low5, high], axis=0))

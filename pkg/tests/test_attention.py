import numpy as np
import pytest

from fmcnet import ops
from fmcnet.attention import AttentionPath, HighFreqRefine, group_count, zero_parameters
from fmcnet.autodiff import ShapeError, Tensor, grad_check
from fmcnet.rng import SplitMix64

from conftest import quad


def make_bands(seed, channels=4, extent=4, scale=1.0):
    rng = SplitMix64(seed)
    return [Tensor(scale * rng.normal((channels, extent, extent, extent))) for _ in range(7)]


class TestGroupCount:
    def test_doubles_with_stage_until_channel_cap(self):
        assert group_count(0, 8) == 1
        assert group_count(1, 8) == 2
        assert group_count(2, 8) == 4
        assert group_count(3, 8) == 8
        assert group_count(5, 8) == 8  # capped at C

    def test_forced_to_divide_channels(self):
        assert group_count(3, 12) == 4  # gcd(8, 12)
        assert group_count(1, 7) == 1


class TestAttentionPath:
    def test_zero_parameters_give_half_map(self):
        path = AttentionPath(SplitMix64(0), channels=4, n_groups=2, mode="max")
        zero_parameters(path)
        amap = path.attention_map(make_bands(1)).data
        assert np.array_equal(amap, np.full((4, 4, 4, 4), 0.5))

    def test_single_channel_softmax_collapses_to_sigmoid(self):
        path = AttentionPath(SplitMix64(2), channels=1, n_groups=1, mode="avg")
        bands = make_bands(3, channels=1)
        got = path.attention_map(bands).data
        # replicate the path by hand; with C = 1 the softmax is identically 1
        pooled = [ops.group_pool(b, 1, "avg") for b in bands]
        projected = [ops.channel_linear(p, proj.weight, proj.bias) for p, proj in zip(pooled, path.band_projs)]
        summary = ops.conv3d(ops.concat(projected, axis=0), path.mix_weight, path.mix_bias)
        want = ops.sigmoid(summary).data
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)

    def test_map_strictly_inside_unit_interval(self):
        for mode in ("max", "avg"):
            path = AttentionPath(SplitMix64(4), channels=4, n_groups=4, mode=mode)
            amap = path.attention_map(make_bands(5, scale=3.0)).data
            assert np.all(amap > 0.0)
            assert np.all(amap < 1.0)

    def test_presigmoid_softmax_normalization(self):
        path = AttentionPath(SplitMix64(6), channels=4, n_groups=2, mode="max")
        bands = make_bands(7)
        pooled = [ops.group_pool(b, 2, "max") for b in bands]
        projected = [ops.channel_linear(p, proj.weight, proj.bias) for p, proj in zip(pooled, path.band_projs)]
        summary = ops.conv3d(ops.concat(projected, axis=0), path.mix_weight, path.mix_bias)
        sums = ops.softmax_channels(summary).data.sum(axis=0)
        np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-12)

    def test_band_count_and_shape_validated(self):
        path = AttentionPath(SplitMix64(8), channels=4, n_groups=2, mode="max")
        with pytest.raises(ShapeError, match="7"):
            path.attention_map(make_bands(9)[:5])
        bands = make_bands(10)
        bands[3] = Tensor(np.zeros((4, 2, 2, 2)))
        with pytest.raises(ShapeError, match="band 3"):
            path.attention_map(bands)


class TestHighFreqRefine:
    def test_zero_parameters_half_attention_concat(self):
        block = HighFreqRefine(SplitMix64(20), channels=4, out_channels=4, stage_index=1)
        zero_parameters(block)
        bands = make_bands(21)
        got = block.weighted_concat(bands).data
        want = 0.5 * np.concatenate([b.data for b in bands] * 2, axis=0)
        assert np.array_equal(got, want)

    def test_zero_bands_give_zero_output(self):
        block = HighFreqRefine(SplitMix64(22), channels=4, out_channels=6, stage_index=2)
        zero_bands = [Tensor(np.zeros((4, 4, 4, 4))) for _ in range(7)]
        out = block(zero_bands).data
        assert np.array_equal(out, np.zeros((6, 4, 4, 4)))

    def test_band_permutation_consistency(self):
        # permuting the bands and the matching projection/conv slots leaves
        # both attention maps unchanged (up to reordered additions)
        block = HighFreqRefine(SplitMix64(23), channels=4, out_channels=4, stage_index=1)
        bands = make_bands(24)
        base_amp = block.amplify.attention_map(bands).data
        base_den = block.denoise.attention_map(bands).data

        perm = [3, 0, 6, 1, 5, 2, 4]
        permuted_bands = [bands[p] for p in perm]
        for path in (block.amplify, block.denoise):
            projs = list(path.band_projs)
            permuted_projs = [projs[p] for p in perm]
            for i, proj in enumerate(permuted_projs):
                setattr(path.band_projs, str(i), proj)
            path.band_projs._items = permuted_projs
            c = path.channels
            wslots = path.mix_weight.data.reshape(c, 7, c, 3, 3, 3)
            path.mix_weight.data[...] = wslots[:, perm].reshape(c, 7 * c, 3, 3, 3)
        perm_amp = block.amplify.attention_map(permuted_bands).data
        perm_den = block.denoise.attention_map(permuted_bands).data
        np.testing.assert_allclose(perm_amp, base_amp, rtol=0, atol=1e-12)
        np.testing.assert_allclose(perm_den, base_den, rtol=0, atol=1e-12)

    def test_refine_gradients(self):
        block = HighFreqRefine(SplitMix64(25), channels=4, out_channels=4, stage_index=1)
        bands = make_bands(26)

        def f(*flat_bands):
            return quad(block(list(flat_bands)))

        err = grad_check(f, bands)
        assert err <= 1e-4

    def test_path_parameters_are_independent(self):
        block = HighFreqRefine(SplitMix64(27), channels=4, out_channels=4, stage_index=1)
        amp_params = {id(p) for p in block.amplify.parameters()}
        den_params = {id(p) for p in block.denoise.parameters()}
        assert not amp_params & den_params

import numpy as np
import pytest

from fmcnet.autodiff import ShapeError, Tensor, grad_check
from fmcnet.checkpoint import (
    load_checkpoint,
    network_checkpoint_config,
    restore_network,
    save_checkpoint,
)
from fmcnet.net import (
    BaselineNet,
    EncoderStage,
    FmcNet,
    NetworkConfig,
    TrainingDiverged,
    class_weights_from_labels,
    foreground_dsc,
    segmentation_loss,
    soft_dice_loss,
    train_network,
    weighted_cross_entropy,
)
from fmcnet.phantom import PhantomConfig, generate
from fmcnet.rng import SplitMix64

from conftest import quad


def tiny_dataset(count=3, extent=16, bodies=2, seed=50):
    out = []
    for i in range(count):
        s = generate(PhantomConfig(extents=(extent,) * 3, bodies=bodies, seed=seed + i, divisor=4))
        out.append((s.intensity, s.labels.astype(np.int64)))
    return out


class TestConfig:
    def test_channel_ladder_doubles(self):
        cfg = NetworkConfig(stages=3, base_channels=8, num_classes=2)
        assert cfg.stage_channels() == [8, 16, 32, 64]

    def test_supervision_weights_halve_and_normalize(self):
        w = NetworkConfig(stages=3, base_channels=4, num_classes=2).supervision_weights()
        assert w[0] == pytest.approx(4 / 7)
        assert w[1] == pytest.approx(2 / 7)
        assert w[2] == pytest.approx(1 / 7)
        assert np.all(w > 0)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_extent_divisibility_error_names_divisor(self):
        cfg = NetworkConfig(stages=3, base_channels=4, num_classes=2)
        with pytest.raises(ShapeError, match="2\\^stages = 8"):
            cfg.validate_extents((20, 24, 24))

    def test_unknown_config_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            NetworkConfig.from_dict({"stages": 2, "base_channels": 4, "num_classes": 2, "bogus": 1})


class TestEncoderStage:
    def test_shape_contract(self):
        cfg = NetworkConfig(stages=1, base_channels=8, num_classes=2)
        stage = EncoderStage(SplitMix64(1), channels=8, stage_index=0, cfg=cfg)
        out = stage(Tensor(np.zeros((8, 16, 16, 16))))
        assert out.shape == (16, 8, 8, 8)

    def test_zero_input_zero_output(self):
        cfg = NetworkConfig(stages=1, base_channels=4, num_classes=2)
        stage = EncoderStage(SplitMix64(2), channels=4, stage_index=0, cfg=cfg)
        out = stage(Tensor(np.zeros((4, 8, 8, 8))))
        assert np.array_equal(out.data, np.zeros((8, 4, 4, 4)))

    def test_odd_extents_rejected(self):
        cfg = NetworkConfig(stages=1, base_channels=4, num_classes=2)
        stage = EncoderStage(SplitMix64(3), channels=4, stage_index=0, cfg=cfg)
        with pytest.raises(ShapeError, match="even"):
            stage(Tensor(np.zeros((4, 6, 7, 8))))

    def test_gradients_sampled(self):
        cfg = NetworkConfig(stages=1, base_channels=4, num_classes=2, state_dim=4)
        stage = EncoderStage(SplitMix64(4), channels=4, stage_index=0, cfg=cfg)
        x = Tensor(SplitMix64(5).normal((4, 8, 8, 8)))
        err = grad_check(lambda t: quad(stage(t)), [x], sample=48)
        assert err <= 1e-4


class TestForward:
    def test_shape_ladder_doubles_channels_and_halves_extents(self):
        from fmcnet import ops

        cfg = NetworkConfig(stages=3, base_channels=4, num_classes=2, state_dim=4)
        net = FmcNet(cfg, seed=9)
        feat = ops.conv3d(Tensor(np.zeros((1, 16, 16, 16))), net.stem_w, net.stem_b)
        shapes = []
        for enc in net.encoders:
            shapes.append(tuple(feat.shape))
            feat = enc(feat)
        assert shapes == [(4, 16, 16, 16), (8, 8, 8, 8), (16, 4, 4, 4)]
        assert feat.shape == (32, 2, 2, 2)

    def test_shape_contract_s2(self):
        cfg = NetworkConfig(stages=2, base_channels=4, num_classes=3)
        net = FmcNet(cfg, seed=1)
        logits = net.forward(Tensor(np.zeros((1, 8, 8, 8))))
        assert [tuple(l.shape) for l in logits] == [(3, 8, 8, 8), (3, 4, 4, 4)]

    def test_deterministic_forward(self):
        cfg = NetworkConfig(stages=2, base_channels=4, num_classes=3)
        net = FmcNet(cfg, seed=2)
        x = Tensor(SplitMix64(3).normal((1, 8, 8, 8)))
        a = net.forward(x)
        b = net.forward(x)
        for la, lb in zip(a, b):
            assert np.array_equal(la.data, lb.data)

    def test_indivisible_extents_rejected(self):
        cfg = NetworkConfig(stages=2, base_channels=4, num_classes=3)
        net = FmcNet(cfg, seed=4)
        with pytest.raises(ShapeError, match="divisible by 2\\^stages = 4"):
            net.forward(Tensor(np.zeros((1, 8, 8, 6))))


class TestLoss:
    def test_uniform_logits_binary_entropy(self):
        # uniform logits, two classes, equal weights: CE is exactly ln 2
        logits = Tensor(np.zeros((2, 4, 4, 4)))
        labels = (SplitMix64(5).uniform((4, 4, 4)) < 0.5).astype(np.int64)
        ce = weighted_cross_entropy(logits, labels, np.ones(2))
        assert ce.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_saturated_margin_drives_loss_to_zero(self):
        labels = (SplitMix64(6).uniform((4, 4, 4)) < 0.4).astype(np.int64)
        logits_full = np.zeros((2, 4, 4, 4))
        logits_full[0] = np.where(labels == 0, 20.0, 0.0)
        logits_full[1] = np.where(labels == 1, 20.0, 0.0)
        loss = segmentation_loss(
            [Tensor(logits_full), Tensor(logits_full[:, ::2, ::2, ::2])],
            labels,
            np.ones(2),
            np.array([0.5, 0.5]),
        )
        assert loss.item() < 1e-6

    def test_supervision_weight_scaling_is_exact(self):
        ds = tiny_dataset(count=1)
        vol, lab = ds[0]
        cfg = NetworkConfig(stages=2, base_channels=4, num_classes=3)
        net = FmcNet(cfg, seed=7)
        logits = net.forward(Tensor(vol[None]))
        w = cfg.supervision_weights()
        base = segmentation_loss(logits, lab, np.ones(3), w).item()
        doubled = segmentation_loss(logits, lab, np.ones(3), 2.0 * w).item()
        assert doubled == 2.0 * base

    def test_label_out_of_range_rejected(self):
        logits = [Tensor(np.zeros((2, 4, 4, 4)))]
        labels = np.full((4, 4, 4), 3, dtype=np.int64)
        with pytest.raises(ValueError, match="0..1"):
            segmentation_loss(logits, labels, np.ones(2), np.ones(1))

    def test_class_permutation_equivariance(self):
        rng = SplitMix64(8)
        logits = rng.normal((3, 4, 4, 4))
        labels = (rng.uniform((4, 4, 4)) * 3).astype(np.int64)
        weights = np.array([1.0, 2.0, 0.5])
        base = segmentation_loss([Tensor(logits)], labels, weights, np.ones(1)).item()
        perm = np.array([2, 0, 1])  # new_class = perm^-1[old]
        inv = np.argsort(perm)
        permuted = segmentation_loss(
            [Tensor(logits[perm])], inv[labels].astype(np.int64), weights[perm], np.ones(1)
        ).item()
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_dice_perfect_prediction_is_zero(self):
        labels = (SplitMix64(9).uniform((4, 4, 4)) < 0.4).astype(np.int64)
        logits = np.zeros((2, 4, 4, 4))
        logits[0] = np.where(labels == 0, 40.0, -40.0)
        logits[1] = np.where(labels == 1, 40.0, -40.0)
        assert soft_dice_loss(Tensor(logits), labels).item() == pytest.approx(0.0, abs=1e-6)


class TestClassWeights:
    def test_inverse_frequency_with_clipping(self):
        labels = np.zeros((10, 10, 10), dtype=np.int64)
        labels[0, 0, :3] = 1  # tiny class -> clipped at 5
        w = class_weights_from_labels([labels], 2)
        assert w[1] == 5.0
        assert 0.2 <= w[0] <= 1.0

    def test_absent_class_gets_max_weight(self):
        labels = np.zeros((4, 4, 4), dtype=np.int64)
        w = class_weights_from_labels([labels], 3)
        assert w[1] == 5.0 and w[2] == 5.0


class TestTraining:
    def test_seed_reproducibility_bitwise(self):
        ds = tiny_dataset()
        cfg = NetworkConfig(stages=2, base_channels=4, num_classes=3)
        losses = []
        for _ in range(2):
            net = FmcNet(cfg, seed=11)
            log = train_network(net, ds, epochs=2, seed=11)
            losses.append(log.losses)
        assert losses[0] == losses[1]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # inf feeds the guard on purpose
    def test_divergence_reports_the_step(self):
        ds = tiny_dataset(count=1)
        cfg = NetworkConfig(stages=2, base_channels=4, num_classes=3)
        net = FmcNet(cfg, seed=12)
        net.stem_w.data[...] = np.inf
        with pytest.raises(TrainingDiverged, match="step 0"):
            train_network(net, ds, epochs=1, seed=12)

    def test_empty_dataset_rejected(self):
        cfg = NetworkConfig(stages=2, base_channels=4, num_classes=3)
        with pytest.raises(ValueError, match="empty"):
            train_network(FmcNet(cfg, seed=13), [], epochs=1, seed=13)

    def test_loss_decreases_on_tiny_run(self):
        ds = tiny_dataset()
        cfg = NetworkConfig(stages=2, base_channels=4, num_classes=3)
        net = FmcNet(cfg, seed=14)
        log = train_network(net, ds, epochs=4, seed=14)
        assert log.epochs[-1]["loss"] < log.epochs[0]["loss"]
        assert log.steps == 12


class TestCheckpoint:
    def test_roundtrip_preserves_logits_to_float32_resolution(self, tmp_path):
        cfg = NetworkConfig(stages=2, base_channels=4, num_classes=3)
        net = FmcNet(cfg, seed=21)
        x = Tensor(SplitMix64(22).normal((1, 8, 8, 8)))
        before = [l.data.copy() for l in net.forward(x)]
        path = tmp_path / "net.fmck"
        save_checkpoint(path, network_checkpoint_config(net), net.named_parameters(), step=17, seed=21)
        restored, config, step, seed = restore_network(path)
        assert step == 17 and seed == 21
        after = restored.forward(x)
        for a, b in zip(before, after):
            scale = max(1.0, float(np.abs(a).max()))
            assert np.abs(a - b.data).max() / scale <= 1e-6

    def test_header_and_manifest_validated(self, tmp_path):
        path = tmp_path / "x.fmck"
        path.write_bytes(b"NOPE" + bytes(10))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_parameter_names_unique_and_shapes_match(self, tmp_path):
        cfg = NetworkConfig(stages=1, base_channels=4, num_classes=2)
        net = FmcNet(cfg, seed=23)
        named = list(net.named_parameters())
        names = [n for n, _ in named]
        assert len(names) == len(set(names))
        path = tmp_path / "net.fmck"
        save_checkpoint(path, network_checkpoint_config(net), named, step=0, seed=23)
        _, params, _, _ = load_checkpoint(path)
        for name, tensor in named:
            assert params[name].shape == tensor.data.shape

    def test_duplicate_parameter_name_rejected(self, tmp_path):
        t = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ValueError, match="duplicate"):
            save_checkpoint(tmp_path / "d.fmck", {}, [("a", t), ("a", t)], 0, 0)

    def test_mismatched_parameter_table_rejected(self, tmp_path):
        cfg = NetworkConfig(stages=1, base_channels=4, num_classes=2)
        net = FmcNet(cfg, seed=24)
        path = tmp_path / "net.fmck"
        named = [(n, p) for n, p in net.named_parameters()][1:]  # drop one entry
        save_checkpoint(path, network_checkpoint_config(net), named, step=0, seed=24)
        with pytest.raises(ValueError, match="mismatch"):
            restore_network(path)


class TestBaseline:
    def test_parameter_budget_within_ten_percent(self):
        cfg = NetworkConfig(stages=3, base_channels=8, num_classes=5)
        full = FmcNet(cfg, seed=30)
        base = BaselineNet(cfg, seed=30)
        assert abs(full.param_count() - base.param_count()) / full.param_count() < 0.10
        for i in range(cfg.stages):
            a, b = full.encoders[i].param_count(), base.encoders[i].param_count()
            assert abs(a - b) / a < 0.10
            a, b = full.decoders[i].param_count(), base.decoders[i].param_count()
            assert abs(a - b) / a < 0.10

    def test_same_head_shapes_as_full_model(self):
        cfg = NetworkConfig(stages=2, base_channels=4, num_classes=3)
        base = BaselineNet(cfg, seed=31)
        logits = base.forward(Tensor(np.zeros((1, 8, 8, 8))))
        assert [tuple(l.shape) for l in logits] == [(3, 8, 8, 8), (3, 4, 4, 4)]

    def test_checkpoint_roundtrip(self, tmp_path):
        cfg = NetworkConfig(stages=2, base_channels=4, num_classes=3)
        base = BaselineNet(cfg, seed=32)
        path = tmp_path / "base.fmck"
        save_checkpoint(path, network_checkpoint_config(base), base.named_parameters(), 3, 32)
        restored, config, _, _ = restore_network(path)
        assert config["variant"] == "baseline"
        x = Tensor(SplitMix64(33).normal((1, 8, 8, 8)))
        for a, b in zip(base.forward(x), restored.forward(x)):
            scale = max(1.0, float(np.abs(a.data).max()))
            assert np.abs(a.data - b.data).max() / scale <= 1e-6


def test_foreground_dsc_means_over_classes():
    gt = np.zeros((4, 4, 4), dtype=np.int64)
    gt[:2] = 1
    gt[2:] = 2
    pred = gt.copy()
    pred[gt == 2] = 0  # miss class 2 entirely
    assert foreground_dsc(pred, gt, 3) == pytest.approx(0.5)

"""Network assembly, deep-supervised loss, and SGD training.

Encoder stages decompose their input, push the low band through the
multi-granularity scan block and the seven high bands through the
attention refinement, then concatenate both halves: channels double and
spatial extents halve per stage. Decoder stages fuse decoder content into
the matching encoder feature's low band and invert the transform back to
full resolution, with a segmentation head at every decoder resolution.

A baseline variant (plain strided pooling / trilinear upsampling and
vanilla conv stages of matched parameter budget) exists for controlled
comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import HighFreqRefine
from .autodiff import NonFiniteError, ShapeError, Tape, Tensor, backward
from .module import Module, ModuleList, conv_param, linear_param, zeros_param
from .ops import (
    add,
    add_scalar,
    channel_linear,
    concat,
    constant,
    conv3d,
    div,
    group_norm,
    log_softmax_channels,
    maxpool2x,
    mul,
    reduce_sum,
    scale,
    silu,
    softmax_channels,
    upsample_trilinear2x,
)
from .rng import SplitMix64
from .ssm import MgSsmConfig, MultiGranularityBlock, ResBlock, default_norm_groups
from .wavelet import dwt3, wtu

DICE_SMOOTH = 1e-5


@dataclass
class NetworkConfig:
    stages: int = 3
    base_channels: int = 8
    num_classes: int = 2
    state_dim: int = 8
    dilations: tuple[int, int, int] = (1, 2, 3)

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.base_channels < 2 or self.base_channels % 2 != 0:
            raise ValueError("base_channels must be even and >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.dilations = tuple(int(d) for d in self.dilations)

    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.stages + 1)]

    def required_divisor(self) -> int:
        return 2**self.stages

    def supervision_weights(self) -> np.ndarray:
        raw = 2.0 ** -np.arange(self.stages)
        return raw / raw.sum()

    def validate_extents(self, extents) -> None:
        div = self.required_divisor()
        for name, e in zip(("depth", "height", "width"), extents):
            if e % div != 0:
                raise ShapeError(f"{name} extent {e} is not divisible by 2^stages = {div}")

    def to_dict(self) -> dict:
        return {
            "stages": self.stages,
            "base_channels": self.base_channels,
            "num_classes": self.num_classes,
            "state_dim": self.state_dim,
            "dilations": list(self.dilations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {"stages", "base_channels", "num_classes", "state_dim", "dilations"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if k == "dilations" else v for k, v in d.items()})


class EncoderStage(Module):
    def __init__(self, rng: SplitMix64, channels: int, stage_index: int, cfg: NetworkConfig):
        super().__init__()
        mg_cfg = MgSsmConfig(dilations=cfg.dilations, state_dim=cfg.state_dim)
        # each half contributes C_i channels, so the concat doubles the width
        self.low_path = MultiGranularityBlock(rng, channels, channels, mg_cfg)
        self.high_path = HighFreqRefine(rng, channels, channels, stage_index)

    def __call__(self, x: Tensor) -> Tensor:
        bands = dwt3(x)
        low = self.low_path(bands.lll)
        high = self.high_path(bands.high_bands())
        return concat([low, high], axis=0)


class DecoderStage(Module):
    def __init__(self, rng: SplitMix64, enc_channels: int, dec_channels: int, num_classes: int):
        super().__init__()
        self.fuse_w = linear_param(rng, enc_channels, enc_channels + dec_channels)
        self.fuse_b = zeros_param(enc_channels)
        self.refine = ResBlock(rng, enc_channels)
        self.head_w = linear_param(rng, num_classes, enc_channels)
        self.head_b = zeros_param(num_classes)

    def __call__(self, enc_feat: Tensor, dec_feat: Tensor) -> tuple[Tensor, Tensor]:
        up = wtu(enc_feat, dec_feat, self.fuse_w, self.fuse_b)
        feat = self.refine(up)
        return feat, channel_linear(feat, self.head_w, self.head_b)


class FmcNet(Module):
    """The full wavelet + attention + multi-granularity segmentation network."""

    variant = "full"

    def __init__(self, config: NetworkConfig, seed: int):
        super().__init__()
        self.config = config
        self.seed = seed
        rng = SplitMix64(seed)
        chans = config.stage_channels()
        self.stem_w = conv_param(rng, chans[0], 1, 3)
        self.stem_b = zeros_param(chans[0])
        self.encoders = ModuleList(
            [EncoderStage(rng, chans[i], i, config) for i in range(config.stages)]
        )
        self.decoders = ModuleList(
            [DecoderStage(rng, chans[s], chans[s + 1], config.num_classes) for s in range(config.stages)]
        )

    def forward(self, volume: Tensor) -> list[Tensor]:
        """Logits at every decoder resolution, full resolution first."""
        if volume.ndim != 4 or volume.shape[0] != 1:
            raise ShapeError(f"forward: expected a [1,D,H,W] volume, got {tuple(volume.shape)}")
        self.config.validate_extents(volume.shape[1:])
        feat = conv3d(volume, self.stem_w, self.stem_b)
        skips = []
        for enc in self.encoders:
            skips.append(feat)
            feat = enc(feat)
        logits = []
        for s in range(self.config.stages - 1, -1, -1):
            feat, head = self.decoders[s](skips[s], feat)
            logits.append(head)
        return list(reversed(logits))


# ---------------------------------------------------------------------------
# ablation baseline: pooled downsampling and plain conv stages

class _ConvBlock(Module):
    def __init__(self, rng, c_in, c_mid, c_out):
        super().__init__()
        self.g1 = default_norm_groups(c_mid)
        self.g2 = default_norm_groups(c_out)
        self.w1 = conv_param(rng, c_mid, c_in, 3)
        self.b1 = zeros_param(c_mid)
        self.w2 = conv_param(rng, c_out, c_mid, 3)
        self.b2 = zeros_param(c_out)

    def __call__(self, x):
        f = silu(group_norm(conv3d(x, self.w1, self.b1), self.g1))
        return silu(group_norm(conv3d(f, self.w2, self.b2), self.g2))


def _conv_block_params(c_in, c_mid, c_out) -> int:
    return 27 * c_in * c_mid + c_mid + 27 * c_mid * c_out + c_out


def _match_width(target: int, c_in: int, c_out: int) -> int:
    best, best_diff = 1, None
    for m in range(1, 4096):
        diff = abs(_conv_block_params(c_in, m, c_out) - target)
        if best_diff is None or diff < best_diff:
            best, best_diff = m, diff
        if _conv_block_params(c_in, m, c_out) > target and diff > (best_diff or 0):
            break
    return best


class BaselineEncoderStage(Module):
    def __init__(self, rng, c_in, c_out, width):
        super().__init__()
        self.block = _ConvBlock(rng, c_in, width, c_out)

    def __call__(self, x):
        return self.block(maxpool2x(x))


class BaselineDecoderStage(Module):
    def __init__(self, rng, enc_channels, dec_channels, width, num_classes):
        super().__init__()
        self.block = _ConvBlock(rng, enc_channels + dec_channels, width, enc_channels)
        self.head_w = linear_param(rng, num_classes, enc_channels)
        self.head_b = zeros_param(num_classes)

    def __call__(self, enc_feat, dec_feat):
        up = upsample_trilinear2x(dec_feat)
        feat = self.block(concat([enc_feat, up], axis=0))
        return feat, channel_linear(feat, self.head_w, self.head_b)


class BaselineNet(Module):
    """Plain U-shaped reference: strided max-pool down, trilinear up.

    Stage widths are solved so each stage's parameter count matches the
    full model's corresponding stage within a few parameters.
    """

    variant = "baseline"

    def __init__(self, config: NetworkConfig, seed: int, widths: dict | None = None):
        super().__init__()
        self.config = config
        self.seed = seed
        rng = SplitMix64(seed)
        chans = config.stage_channels()
        if widths is None:
            widths = baseline_widths(config)
        self.widths = widths
        self.stem_w = conv_param(rng, chans[0], 1, 3)
        self.stem_b = zeros_param(chans[0])
        self.encoders = ModuleList(
            [
                BaselineEncoderStage(rng, chans[i], chans[i + 1], widths["encoder"][i])
                for i in range(config.stages)
            ]
        )
        self.decoders = ModuleList(
            [
                BaselineDecoderStage(rng, chans[s], chans[s + 1], widths["decoder"][s], config.num_classes)
                for s in range(config.stages)
            ]
        )

    def forward(self, volume: Tensor) -> list[Tensor]:
        if volume.ndim != 4 or volume.shape[0] != 1:
            raise ShapeError(f"forward: expected a [1,D,H,W] volume, got {tuple(volume.shape)}")
        self.config.validate_extents(volume.shape[1:])
        feat = conv3d(volume, self.stem_w, self.stem_b)
        skips = []
        for enc in self.encoders:
            skips.append(feat)
            feat = enc(feat)
        logits = []
        for s in range(self.config.stages - 1, -1, -1):
            feat, head = self.decoders[s](skips[s], feat)
            logits.append(head)
        return list(reversed(logits))


def baseline_widths(config: NetworkConfig) -> dict:
    """Solve per-stage hidden widths to match the full model's budget."""
    probe = FmcNet(config, seed=0)
    chans = config.stage_channels()
    enc_widths = []
    for i in range(config.stages):
        target = probe.encoders[i].param_count()
        enc_widths.append(_match_width(target, chans[i], chans[i + 1]))
    dec_widths = []
    for s in range(config.stages):
        dec = probe.decoders[s]
        target = dec.param_count() - dec.head_w.size - dec.head_b.size
        dec_widths.append(_match_width(target, chans[s] + chans[s + 1], chans[s]))
    return {"encoder": enc_widths, "decoder": dec_widths}


# ---------------------------------------------------------------------------
# loss

def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    # nearest-neighbor with the top-corner voxel as anchor
    return labels[::factor, ::factor, ::factor]


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    onehot = np.zeros((num_classes, *labels.shape))
    zz, yy, xx = np.indices(labels.shape)
    onehot[labels, zz, yy, xx] = 1.0
    return onehot


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray, class_weights) -> Tensor:
    """Per-voxel negative log-likelihood, normalized by the weight mass."""
    k = logits.shape[0]
    onehot = _one_hot(labels, k)
    weighted_mask = onehot * np.asarray(class_weights, dtype=np.float64)[:, None, None, None]
    denom = float(weighted_mask.sum())
    return scale(reduce_sum(mul(constant(weighted_mask), log_softmax_channels(logits))), -1.0 / denom)


def soft_dice_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """1 minus the smoothed soft Dice, averaged over classes present."""
    from .ops import narrow

    k = logits.shape[0]
    onehot = _one_hot(labels, k)
    probs = softmax_channels(logits)
    present = np.unique(labels)
    acc = None
    for cls in present:
        pk = narrow(probs, 0, int(cls), 1)
        gk = constant(onehot[int(cls)][None])
        inter = reduce_sum(mul(pk, gk))
        denom = add_scalar(reduce_sum(pk), float(onehot[int(cls)].sum()) + DICE_SMOOTH)
        dice_cls = div(add_scalar(scale(inter, 2.0), DICE_SMOOTH), denom)
        acc = dice_cls if acc is None else add(acc, dice_cls)
    return add_scalar(scale(acc, -1.0 / len(present)), 1.0)


def segmentation_loss(logits_list, labels: np.ndarray, class_weights, stage_weights) -> Tensor:
    """Deep-supervised sum of weighted cross-entropy and soft Dice terms."""
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise TypeError("labels must be an integer mask")
    k = logits_list[0].shape[0]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in 0..{k - 1}, got range [{labels.min()}, {labels.max()}]")
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (k,):
        raise ShapeError(f"class_weights must have shape [{k}]")
    stage_weights = np.asarray(stage_weights, dtype=np.float64)
    if len(stage_weights) != len(logits_list):
        raise ShapeError("one supervision weight per decoder stage is required")

    total = None
    for s, logits in enumerate(logits_list):
        lab = downsample_labels(labels, 2**s)
        if tuple(logits.shape[1:]) != lab.shape:
            raise ShapeError(
                f"stage {s} logits spatial shape {tuple(logits.shape[1:])} does not match labels {lab.shape}"
            )
        term = add(weighted_cross_entropy(logits, lab, class_weights), soft_dice_loss(logits, lab))
        weighted = scale(term, float(stage_weights[s]))
        total = weighted if total is None else add(total, weighted)
    return total


def class_weights_from_labels(label_volumes, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights over the training set, clipped to [0.2, 5]."""
    counts = np.zeros(num_classes)
    total = 0
    for lab in label_volumes:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=num_classes)[:num_classes]
        total += lab.size
    with np.errstate(divide="ignore"):
        w = total / (num_classes * counts)
    return np.clip(w, 0.2, 5.0)


# ---------------------------------------------------------------------------
# training

class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at optimizer step {step}")
        self.step = step


@dataclass
class TrainSettings:
    learning_rate: float = 0.01
    momentum: float = 0.9
    poly_power: float = 0.9

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        known = {"learning_rate", "momentum", "poly_power"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "momentum": self.momentum, "poly_power": self.poly_power}


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)       # one entry per optimizer step
    epochs: list = field(default_factory=list)       # per-epoch summaries
    steps: int = 0


def foreground_dsc(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    from .metrics import dsc

    vals = [dsc(pred, gt, cls) for cls in range(1, num_classes)]
    return float(np.mean(vals)) if vals else 0.0


def train_network(
    net,
    dataset,
    epochs: int,
    seed: int,
    settings: TrainSettings | None = None,
    class_weights=None,
    log_fn=None,
) -> TrainLog:
    """Plain SGD with momentum and polynomial learning-rate decay.

    ``dataset`` is a list of (intensity [D,H,W] float, labels [D,H,W] int)
    pairs; every sample is one optimizer step. Deterministic in (net seed,
    shuffle seed): identical runs produce bit-identical parameter streams.
    """
    if not dataset:
        raise ValueError("dataset must not be empty")
    settings = settings or TrainSettings()
    cfg = net.config
    for vol, _ in dataset:
        cfg.validate_extents(vol.shape)
    if class_weights is None:
        class_weights = class_weights_from_labels([lab for _, lab in dataset], cfg.num_classes)
    stage_weights = cfg.supervision_weights()
    params = net.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    shuffle_rng = SplitMix64(seed + 0x5EED)
    total_steps = epochs * len(dataset)
    log = TrainLog()
    step = 0
    for epoch in range(epochs):
        order = shuffle_rng.shuffle(list(range(len(dataset))))
        epoch_losses = []
        epoch_dscs = []
        lr = settings.learning_rate
        for idx in order:
            vol, lab = dataset[idx]
            lr = settings.learning_rate * (1.0 - step / total_steps) ** settings.poly_power
            try:
                with Tape() as tape:
                    logits = net.forward(Tensor(vol[None]))
                    loss = segmentation_loss(logits, lab, class_weights, stage_weights)
            except NonFiniteError:
                raise TrainingDiverged(step) from None
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged(step)
            grads = backward(tape, loss, params=params)
            for i, p in enumerate(params):
                velocity[i] = settings.momentum * velocity[i] + grads[p]
                p.data -= lr * velocity[i]
            pred = np.argmax(logits[0].data, axis=0)
            epoch_dscs.append(foreground_dsc(pred, lab, cfg.num_classes))
            epoch_losses.append(loss_val)
            log.losses.append(loss_val)
            step += 1
        record = {
            "epoch": epoch,
            "loss": float(np.mean(epoch_losses)),
            "train_dsc": float(np.mean(epoch_dscs)),
            "lr": lr,
        }
        log.epochs.append(record)
        if log_fn is not None:
            log_fn(record)
    log.steps = step
    return log


def predict_labels(net, volume: np.ndarray) -> np.ndarray:
    logits = net.forward(Tensor(np.asarray(volume, dtype=np.float64)[None]))
    return np.argmax(logits[0].data, axis=0).astype(np.uint8)

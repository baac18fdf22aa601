"""Synthetic stacked-body phantoms and a raw volume file format.

A phantom holds K near-identical ellipsoidal bodies stacked along the
depth axis with small gaps, labeled 1..K bottom to top over background 0.
The intensity channel is the blurred body indicator plus additive noise,
reproducing the two difficulties the network targets: smeared boundaries
and adjacent lookalike structures. Generation is a pure function of the
config (splitmix random stream), so datasets are byte-reproducible.

Volume files (.vvol) are a one-line JSON header followed by little-endian
raw voxels: float32 for intensities, uint8 for label masks.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64

HEADER_SEMANTICS = ("intensity", "labels")

# Fixed geometry fractions; jitters in PhantomConfig move around these.
_Z_FILL = 0.70      # body z-diameter as a fraction of its slot
_XY_FILL = 0.64     # body y/x diameter as a fraction of the volume extent


@dataclass
class PhantomConfig:
    extents: tuple[int, int, int] = (24, 24, 24)
    bodies: int = 4
    spacing_jitter: float = 0.05
    size_jitter: float = 0.05
    blur_sigma: float = 0.8
    noise_sigma: float = 0.05
    seed: int = 0
    divisor: int = 8

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        if self.bodies < 1:
            raise ValueError("bodies must be >= 1")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("sigmas must be >= 0")
        if not (0.0 <= self.spacing_jitter <= 0.3 and 0.0 <= self.size_jitter <= 0.3):
            raise ValueError("jitter fractions must lie in [0, 0.3]")
        for name, e in zip(("depth", "height", "width"), self.extents):
            if e % self.divisor != 0:
                raise ValueError(f"{name} extent {e} is not divisible by {self.divisor}")
        d, h, w = self.extents
        slot = d / self.bodies
        min_depth = math.ceil(2 * self.bodies / _Z_FILL)
        if slot * _Z_FILL / 2 < 1.0:
            raise ValueError(
                f"{self.bodies} bodies cannot fit a depth of {d}; depth must be at least {min_depth}"
            )
        if h * _XY_FILL / 2 < 1.5 or w * _XY_FILL / 2 < 1.5:
            raise ValueError("height/width must be at least 5 voxels to fit a body")

    def to_dict(self) -> dict:
        return {
            "extents": list(self.extents),
            "bodies": self.bodies,
            "spacing_jitter": self.spacing_jitter,
            "size_jitter": self.size_jitter,
            "blur_sigma": self.blur_sigma,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "divisor": self.divisor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        d = dict(d)
        if "extents" in d:
            d["extents"] = tuple(d["extents"])
        return cls(**d)


@dataclass
class PhantomSample:
    intensity: np.ndarray  # [D,H,W] float64
    labels: np.ndarray     # [D,H,W] uint8, 0 = background
    config: PhantomConfig = field(repr=False, default=None)


def _gaussian_blur(vol: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return vol
    radius = max(1, int(math.ceil(3.0 * sigma)))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = vol
    for axis in range(3):
        padded = np.pad(out, [(radius, radius) if ax == axis else (0, 0) for ax in range(3)])
        acc = np.zeros_like(out)
        for i, tap in enumerate(taps):
            idx = [slice(None)] * 3
            idx[axis] = slice(i, i + out.shape[axis])
            acc += tap * padded[tuple(idx)]
        out = acc
    return out


def generate(cfg: PhantomConfig) -> PhantomSample:
    """Deterministically realize one labeled phantom from its config."""
    rng = SplitMix64(cfg.seed)
    d, h, w = cfg.extents
    slot = d / cfg.bodies
    rz0 = slot * _Z_FILL / 2
    ry0 = h * _XY_FILL / 2
    rx0 = w * _XY_FILL / 2
    labels = np.zeros(cfg.extents, dtype=np.uint8)
    zz, yy, xx = np.indices(cfg.extents, dtype=np.float64)
    for i in range(cfg.bodies):
        # one volume factor per body keeps consecutive voxel counts close
        vol_factor = 1.0 + cfg.size_jitter * float(rng.uniform(1, -1.0, 1.0)[0])
        axis_scale = vol_factor ** (1.0 / 3.0)
        # integer center offsets keep the voxelization phase identical across bodies
        dz = int(round(cfg.spacing_jitter * slot * float(rng.uniform(1, -1.0, 1.0)[0])))
        dy = int(round(cfg.spacing_jitter * 2 * float(rng.uniform(1, -1.0, 1.0)[0])))
        dx = int(round(cfg.spacing_jitter * 2 * float(rng.uniform(1, -1.0, 1.0)[0])))
        cz = (i + 0.5) * slot + dz
        cy = h / 2 + dy
        cx = w / 2 + dx
        rz, ry, rx = rz0 * axis_scale, ry0 * axis_scale, rx0 * axis_scale
        inside = ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        labels[inside] = i + 1
    intensity = (labels > 0).astype(np.float64)
    intensity = _gaussian_blur(intensity, cfg.blur_sigma)
    if cfg.noise_sigma > 0:
        intensity = intensity + cfg.noise_sigma * rng.normal(cfg.extents)
    return PhantomSample(intensity=intensity, labels=labels, config=cfg)


# ---------------------------------------------------------------------------
# volume files

def write_volume(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0), semantic: str = "intensity") -> None:
    if semantic not in HEADER_SEMANTICS:
        raise ValueError(f"semantic must be one of {HEADER_SEMANTICS}")
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValueError(f"volumes are [D,H,W], got ndim={array.ndim}")
    dtype = "<u1" if semantic == "labels" else "<f4"
    payload = np.ascontiguousarray(array, dtype=dtype).tobytes()
    header = json.dumps(
        {
            "dims": list(array.shape),
            "dtype": dtype,
            "spacing": [float(s) for s in spacing],
            "semantic": semantic,
        },
        sort_keys=True,
    )
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(payload)
    os.replace(tmp, path)


def read_volume(path, expected_classes: int | None = None):
    """Returns (array, spacing, semantic); validates header and payload size."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed volume header: {exc}") from None
    for key in ("dims", "dtype", "spacing", "semantic"):
        if key not in header:
            raise ValueError(f"{path}: volume header is missing {key!r}")
    dims = tuple(int(x) for x in header["dims"])
    if len(dims) != 3 or any(e < 1 for e in dims):
        raise ValueError(f"{path}: header dims {dims} are not a valid volume shape")
    if header["semantic"] not in HEADER_SEMANTICS:
        raise ValueError(f"{path}: unknown semantic {header['semantic']!r}")
    dtype = np.dtype(header["dtype"])
    expected_bytes = int(np.prod(dims)) * dtype.itemsize
    if len(payload) < expected_bytes:
        raise ValueError(f"{path}: payload short by {expected_bytes - len(payload)} bytes")
    if len(payload) > expected_bytes:
        raise ValueError(f"{path}: payload has {len(payload) - expected_bytes} extra bytes")
    array = np.frombuffer(payload, dtype=dtype).reshape(dims)
    if header["semantic"] == "labels" and expected_classes is not None:
        top = int(array.max())
        if top >= expected_classes:
            raise ValueError(
                f"{path}: label value {top} is out of range for {expected_classes} classes"
            )
    spacing = tuple(float(s) for s in header["spacing"])
    return array, spacing, header["semantic"]


def write_dataset(directory, cfg: PhantomConfig, count: int) -> list[dict]:
    """Emit NNN_img.vvol / NNN_lbl.vvol pairs plus dataset.json.

    Sample i is generated from the config with seed cfg.seed + i, so a
    dataset prefix is stable under a larger count.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    os.makedirs(directory, exist_ok=True)
    samples = []
    for i in range(count):
        sample_cfg = PhantomConfig.from_dict({**cfg.to_dict(), "seed": cfg.seed + i})
        sample = generate(sample_cfg)
        img_name = f"{i:03d}_img.vvol"
        lbl_name = f"{i:03d}_lbl.vvol"
        write_volume(os.path.join(directory, img_name), sample.intensity, semantic="intensity")
        write_volume(os.path.join(directory, lbl_name), sample.labels, semantic="labels")
        samples.append({"image": img_name, "labels": lbl_name, "seed": sample_cfg.seed})
    meta = {"config": cfg.to_dict(), "count": count, "samples": samples}
    tmp = os.path.join(directory, "dataset.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(directory, "dataset.json"))
    return samples


def load_dataset(directory):
    """Read a generated dataset back as (samples, meta); meta echoes the
    voxel spacing shared by the label volumes."""
    meta_path = os.path.join(directory, "dataset.json")
    with open(meta_path) as fh:
        meta = json.load(fh)
    num_classes = meta["config"]["bodies"] + 1
    pairs = []
    spacing = (1.0, 1.0, 1.0)
    for entry in meta["samples"]:
        img, _, sem = read_volume(os.path.join(directory, entry["image"]))
        if sem != "intensity":
            raise ValueError(f"{entry['image']}: expected an intensity volume")
        lab, spacing, sem = read_volume(os.path.join(directory, entry["labels"]), expected_classes=num_classes)
        if sem != "labels":
            raise ValueError(f"{entry['labels']}: expected a label volume")
        pairs.append((img.astype(np.float64), lab.astype(np.int64)))
    meta["spacing"] = list(spacing)
    return pairs, meta

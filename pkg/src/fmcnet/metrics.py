"""Segmentation metrics: per-class Dice overlap and 95th-percentile
boundary distance.

Boundary voxels are in-set voxels with at least one of their six face
neighbors outside the set (volume borders count as outside). Directed
distances go from every boundary voxel of one set to the nearest boundary
voxel of the other, Euclidean over spacing-scaled voxel centers; the
reported value is the larger of the two directed nearest-rank 95th
percentiles. A class with an empty prediction or reference is undefined
for the distance metric and excluded from means.
"""

from __future__ import annotations

import math

import numpy as np

from . import backend
from .autodiff import ShapeError


def dsc(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """2|P∩G| / (|P|+|G|) for voxels of one class; 1.0 when both sets are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"dsc: shapes differ, {pred.shape} vs {gt.shape}")
    p = pred == cls
    g = gt == cls
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Integer [n,3] coordinates of 6-connectivity boundary voxels."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    all_neighbors = np.ones(mask.shape, dtype=bool)
    for axis in range(3):
        for shift in (-1, 1):
            idx = [slice(1, -1)] * 3
            idx[axis] = slice(1 + shift, mask.shape[axis] + 1 + shift)
            all_neighbors &= padded[tuple(idx)]
    return np.argwhere(mask & ~all_neighbors)


def _nearest_rank(sorted_vals: np.ndarray, q: float) -> float:
    rank = max(1, math.ceil(q * len(sorted_vals)))
    return float(sorted_vals[rank - 1])


def hd95(pred: np.ndarray, gt: np.ndarray, cls: int, spacing=(1.0, 1.0, 1.0)) -> float | None:
    """Symmetric 95th-percentile boundary distance in mm; None when undefined."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"hd95: shapes differ, {pred.shape} vs {gt.shape}")
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (3,) or np.any(spacing <= 0):
        raise ValueError("spacing must be three positive extents")
    p = pred == cls
    g = gt == cls
    if not p.any() or not g.any():
        return None
    bp = boundary_voxels(p).astype(np.float64) * spacing
    bg = boundary_voxels(g).astype(np.float64) * spacing
    d_pg = np.empty(len(bp))
    d_gp = np.empty(len(bg))
    backend.directed_nn_dists(np.ascontiguousarray(bp), np.ascontiguousarray(bg), d_pg)
    backend.directed_nn_dists(np.ascontiguousarray(bg), np.ascontiguousarray(bp), d_gp)
    return max(_nearest_rank(np.sort(d_pg), 0.95), _nearest_rank(np.sort(d_gp), 0.95))


def evaluation_report(pairs, num_classes: int, spacing=(1.0, 1.0, 1.0)) -> dict:
    """Aggregate foreground DSC/HD95 over (pred, gt) mask pairs.

    Per-class values are averaged over the samples where they are defined;
    classes whose HD95 is undefined in any sample are listed.
    """
    spacing = tuple(float(s) for s in spacing)
    per_class_dsc = {cls: [] for cls in range(1, num_classes)}
    per_class_hd: dict[int, list] = {cls: [] for cls in range(1, num_classes)}
    undefined = set()
    for pred, gt in pairs:
        for cls in range(1, num_classes):
            per_class_dsc[cls].append(dsc(pred, gt, cls))
            h = hd95(pred, gt, cls, spacing)
            if h is None:
                undefined.add(cls)
            else:
                per_class_hd[cls].append(h)
    dsc_by_class = {str(cls): float(np.mean(v)) for cls, v in per_class_dsc.items()}
    hd_by_class = {str(cls): (float(np.mean(v)) if v else None) for cls, v in per_class_hd.items()}
    defined_hd = [v for v in hd_by_class.values() if v is not None]
    return {
        "num_classes": num_classes,
        "voxel_spacing": list(spacing),
        "dsc": dsc_by_class,
        "hd95": hd_by_class,
        "mean_dsc": float(np.mean(list(dsc_by_class.values()))),
        "mean_hd95": (float(np.mean(defined_hd)) if defined_hd else None),
        "hd95_undefined_classes": sorted(undefined),
    }

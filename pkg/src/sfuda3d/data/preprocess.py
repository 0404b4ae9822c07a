"""Foreground crop, isotropic resampling, percentile clipping and z-normalisation."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from sfuda3d.data.volume import LabelMap, Volume
from sfuda3d.exceptions import DimensionError, EmptyForegroundError

BBOX_MARGIN = 4
TARGET_SPACING = 1.0
CLIP_PERCENTILE = 98.0


def foreground_bbox(labels: np.ndarray, margin: int = BBOX_MARGIN) -> tuple[slice, slice, slice]:
    idx = np.nonzero(labels)
    if idx[0].size == 0:
        raise EmptyForegroundError("label map has no foreground voxels")
    return tuple(slice(max(int(i.min()) - margin, 0), min(int(i.max()) + margin + 1, s))
                 for i, s in zip(idx, labels.shape))


def resample(values: np.ndarray, spacing, target: float = TARGET_SPACING, order: int = 1) -> np.ndarray:
    """Resample onto a ``target``-mm grid; voxel centres stay aligned with the input's."""
    spacing = np.asarray(spacing, dtype=np.float64)
    if np.all(spacing == target):
        return values.copy()
    new_shape = [max(int(round(s * sp / target)), 1) for s, sp in zip(values.shape, spacing)]
    axes = [(np.arange(n) + 0.5) * target / sp - 0.5 for n, sp in zip(new_shape, spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    return ndimage.map_coordinates(values, coords, order=order, mode="nearest")


def percentile_nearest_rank(values: np.ndarray, q: float) -> float:
    """Smallest sample with at least ``q`` percent of the samples at or below it."""
    flat = np.asarray(values).reshape(-1)
    rank = max(math.ceil(q / 100.0 * flat.size) - 1, 0)
    return float(np.partition(flat, rank)[rank])


def preprocess(vol: Volume, labels: LabelMap) -> tuple[Volume, LabelMap]:
    if vol.dims != labels.dims:
        raise DimensionError(f"volume dims {vol.dims} differ from label dims {labels.dims}")
    box = foreground_bbox(labels.values)
    image = vol.values[box].astype(np.float64)
    lab = labels.values[box]
    image = resample(image, vol.spacing, order=1)
    lab = resample(lab, labels.spacing, order=0).astype(np.uint8)
    cap = percentile_nearest_rank(image, CLIP_PERCENTILE)
    image = np.minimum(image, cap)
    std = image.std()
    image = (image - image.mean()) / (std if std > 0 else 1.0)
    iso = (TARGET_SPACING,) * 3
    return Volume(image.astype(np.float32), iso), LabelMap(lab, iso)

"""Training-time augmentation of cubic patches.

Each of five transforms fires independently with probability ``p``; the
decision draws come first so a fixed generator state fixes the subset.
Labels only receive the geometric transforms and are always resampled with
nearest-neighbour interpolation.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

ELASTIC_GRID = 4
ELASTIC_SIGMA = 2.0


def _warp(image: np.ndarray, labels: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    image = ndimage.map_coordinates(image, coords, order=1, mode="nearest").astype(np.float32)
    labels = ndimage.map_coordinates(labels, coords, order=0, mode="nearest").astype(np.uint8)
    return image, labels


def _identity_coords(shape) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))


def flip(image, labels, rng):
    for axis in range(3):
        if rng.random() < 0.5:
            image, labels = np.flip(image, axis), np.flip(labels, axis)
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def rotate90(image, labels, rng):
    axes = [(1, 2), (0, 2), (0, 1)][rng.integers(3)]
    k = int(rng.integers(1, 4))
    return (np.ascontiguousarray(np.rot90(image, k, axes)),
            np.ascontiguousarray(np.rot90(labels, k, axes)))


def intensity_jitter(image, labels, rng):
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-0.1, 0.1)
    return (image * scale + shift).astype(np.float32), labels


def rescale(image, labels, rng):
    factor = rng.uniform(0.9, 1.1)
    center = (np.asarray(image.shape, dtype=np.float64) - 1) / 2
    coords = _identity_coords(image.shape)
    coords = center[:, None, None, None] + (coords - center[:, None, None, None]) / factor
    return _warp(image, labels, coords)


def elastic(image, labels, rng):
    coarse = rng.normal(0.0, ELASTIC_SIGMA, size=(3,) + (ELASTIC_GRID,) * 3)
    zoom = [s / ELASTIC_GRID for s in image.shape]
    disp = np.stack([ndimage.zoom(c, zoom, order=1, mode="nearest", grid_mode=True) for c in coarse])
    return _warp(image, labels, _identity_coords(image.shape) + disp)


TRANSFORMS = (flip, rotate90, intensity_jitter, rescale, elastic)


def augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator, p: float = 0.5):
    chosen = rng.random(len(TRANSFORMS)) < p
    for fire, transform in zip(chosen, TRANSFORMS):
        if fire:
            image, labels = transform(image, labels, rng)
    return image, labels

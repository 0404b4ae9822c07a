"""Synthetic paired two-modality cardiac-like phantoms.

Geometry depends only on the seed, so modalities ``A`` and ``B`` generated
from the same seed share one label map.  The modalities differ in their
class-to-intensity map, noise level and a gamma curve applied to ``B``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sfuda3d.data.volume import LabelMap, Volume
from sfuda3d.exceptions import ParameterError


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    jitter: float
    radii_low: tuple[float, float, float]
    radii_high: tuple[float, float, float]
    anchor: int | None = None  # reuse the jittered center of another class


# painted in this order; later structures overwrite earlier ones
DEFAULT_STRUCTURES: tuple[tuple[int, Ellipsoid], ...] = (
    (4, Ellipsoid((40, 32, 30), 3.0, (11.0, 10.0, 12.0), (13.0, 12.0, 14.0))),
    (3, Ellipsoid((40, 32, 30), 1.0, (7.0, 6.5, 8.0), (8.5, 8.0, 9.5), anchor=4)),
    (2, Ellipsoid((22, 20, 40), 3.0, (6.0, 6.0, 5.0), (8.0, 8.0, 7.0))),
    (1, Ellipsoid((22, 44, 22), 3.0, (3.5, 3.5, 8.0), (5.0, 5.0, 11.0))),
)

INTENSITY_A = {0: 0.1, 1: 0.8, 2: 0.55, 3: 0.35, 4: 0.65}
INTENSITY_B = {0: 0.2, 1: 0.3, 2: 0.7, 3: 0.85, 4: 0.45}


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    modality: str = "A"
    shape: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    structures: tuple[tuple[int, Ellipsoid], ...] = DEFAULT_STRUCTURES
    max_tilt_deg: float = 15.0
    intensity: dict = field(default_factory=lambda: {"A": dict(INTENSITY_A), "B": dict(INTENSITY_B)})
    noise: dict = field(default_factory=lambda: {"A": 0.05, "B": 0.08})
    gamma: dict = field(default_factory=lambda: {"A": 1.0, "B": 1.5})
    bias_strength: float = 0.1


def _rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    angles = np.deg2rad(rng.uniform(-max_deg, max_deg, size=3))
    cx, cy, cz = np.cos(angles)
    sx, sy, sz = np.sin(angles)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def phantom_labels(spec: PhantomSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0x6E0])
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in spec.shape], indexing="ij"), axis=-1)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    centers: dict[int, np.ndarray] = {}
    for cls, ell in spec.structures:
        base = centers[ell.anchor] if ell.anchor is not None else np.asarray(ell.center, dtype=np.float64)
        center = base + rng.uniform(-ell.jitter, ell.jitter, size=3)
        centers[cls] = center
        radii = rng.uniform(ell.radii_low, ell.radii_high)
        rot = _rotation(rng, spec.max_tilt_deg)
        local = (grid - center) @ rot
        inside = ((local / radii) ** 2).sum(axis=-1) <= 1.0
        labels[inside] = cls
    return labels


def _bias_field(rng: np.random.Generator, shape, strength: float) -> np.ndarray:
    coords = [np.linspace(-1.0, 1.0, s) for s in shape]
    gx, gy, gz = np.meshgrid(*coords, indexing="ij")
    field_ = np.zeros(shape)
    for _ in range(3):
        freq = rng.uniform(0.3, 1.2, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(np.pi * (freq[0] * gx + freq[1] * gy + freq[2] * gz) + phase)
    field_ /= 3.0
    return 1.0 + strength * field_


def gen_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    if spec.modality not in spec.intensity:
        raise ParameterError(f"unknown modality {spec.modality!r}")
    labels = phantom_labels(spec)
    rng = np.random.default_rng([spec.seed, ord(spec.modality[0]), 0x1A7])
    lut = np.zeros(256)
    for cls, value in spec.intensity[spec.modality].items():
        lut[int(cls)] = value
    clean = lut[labels] * _bias_field(rng, spec.shape, spec.bias_strength)
    gamma = spec.gamma.get(spec.modality, 1.0)
    if gamma != 1.0:
        clean = np.clip(clean, 0.0, None) ** gamma
    image = clean + rng.normal(0.0, spec.noise[spec.modality], size=spec.shape)
    return Volume(image.astype(np.float32), spec.spacing), LabelMap(labels, spec.spacing)

"""Regular crop grids with a final window clamped to each volume edge."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sfuda3d.exceptions import ParameterError


@dataclass(frozen=True)
class Crop:
    origin: tuple[int, int, int]
    size: int

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + self.size) for o in self.origin)


def as_stride(stride) -> tuple[int, int, int]:
    if np.isscalar(stride):
        stride = (stride,) * 3
    stride = tuple(int(s) for s in stride)
    if len(stride) != 3:
        raise ParameterError(f"stride needs three components, got {stride}")
    if min(stride) < 1:
        raise ParameterError(f"stride components must be >= 1, got {stride}")
    return stride


def axis_origins(length: int, patch: int, stride: int) -> list[int]:
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if patch > length:
        raise ParameterError(f"patch {patch} exceeds dimension {length}")
    origins = list(range(0, length - patch + 1, stride))
    if origins[-1] != length - patch:
        origins.append(length - patch)
    return origins


def crop_grid(dims, patch: int, stride) -> list[Crop]:
    stride = as_stride(stride)
    axes = [axis_origins(int(L), patch, s) for L, s in zip(dims, stride)]
    return [Crop((i, j, k), patch) for i in axes[0] for j in axes[1] for k in axes[2]]


def random_crop(dims, patch: int, rng: np.random.Generator) -> Crop:
    if min(dims) < patch:
        raise ParameterError(f"patch {patch} exceeds volume dims {tuple(dims)}")
    return Crop(tuple(int(rng.integers(0, L - patch + 1)) for L in dims), patch)

"""Sliced Wasserstein distance between equal-size point sets, differentiable in the first argument."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sfuda3d.exceptions import DimensionError, ParameterError
from sfuda3d.numerics.tensor import Tensor, make_result

_RESAMPLE_KEY = 0x5EED


@dataclass
class PointSet:
    points: Tensor
    tags: np.ndarray | None = None

    def __post_init__(self):
        if not isinstance(self.points, Tensor):
            self.points = Tensor(self.points)
        if self.points.data.ndim != 2 or self.points.shape[0] < 1:
            raise ParameterError(f"a point set needs shape (n >= 1, d), got {self.points.shape}")

    def __len__(self) -> int:
        return self.points.shape[0]


def _as_points(x) -> Tensor:
    if isinstance(x, PointSet):
        return x.points
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def projection_directions(num_projections: int, dim: int, seed) -> np.ndarray:
    """Unit directions from normalised Gaussian draws, shape ``(num_projections, dim)``."""
    if num_projections < 1:
        raise ParameterError("num_projections must be >= 1")
    theta = np.random.default_rng(seed).standard_normal((num_projections, dim))
    return theta / np.linalg.norm(theta, axis=1, keepdims=True)


def wasserstein1d(a, b) -> float:
    """Mean squared difference of aligned order statistics."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    d = np.sort(a) - np.sort(b)
    return float(np.mean(d * d))


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 2 or y.ndim != 2:
        raise ParameterError("point sets must be (n, d) arrays")
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ParameterError("point sets must be non-empty")
    if x.shape[1] != y.shape[1]:
        raise ParameterError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")


def match_cardinality(y: np.ndarray, n: int, seed) -> np.ndarray:
    """Resample ``y`` with replacement to ``n`` rows when the sizes differ."""
    if y.shape[0] == n:
        return y
    idx = np.random.default_rng([_RESAMPLE_KEY, int(seed)]).integers(0, y.shape[0], size=n)
    return y[idx]


def _sorted_projections(x: np.ndarray, y: np.ndarray, theta: np.ndarray):
    """Sort permutation of ``x`` per direction and the aligned differences, both ``(L, n)``."""
    px = theta @ x.T
    py = theta @ y.T
    # sorted values do not depend on the algorithm; only the permutation does, and only at ties
    py.sort(axis=1)
    order_x = np.argsort(px, axis=1)
    sorted_x = np.take_along_axis(px, order_x, 1)
    tied = np.flatnonzero((np.diff(sorted_x, axis=1) == 0).any(axis=1))
    if tied.size:
        order_x[tied] = np.argsort(px[tied], axis=1, kind="stable")
    return order_x, sorted_x - py


def projection_terms(X, Y, num_projections: int = 128, seed=0) -> np.ndarray:
    """Per-direction costs whose mean is :func:`swd`."""
    x = np.asarray(_as_points(X).data, dtype=np.float64)
    y = np.asarray(_as_points(Y).data, dtype=np.float64)
    _check_pair(x, y)
    y = match_cardinality(y, x.shape[0], seed)
    _, diff = _sorted_projections(x, y, projection_directions(num_projections, x.shape[1], seed))
    return np.mean(diff * diff, axis=1)


def swd(X, Y, num_projections: int = 128, seed=0) -> Tensor:
    x_t = _as_points(X)
    y_t = _as_points(Y)
    x = np.asarray(x_t.data, dtype=np.float64)
    y = np.asarray(y_t.data, dtype=np.float64)
    _check_pair(x, y)
    y = match_cardinality(y, x.shape[0], seed)
    theta = projection_directions(num_projections, x.shape[1], seed)
    order_x, diff = _sorted_projections(x, y, theta)
    L, n = diff.shape
    value = np.asarray(np.mean(diff * diff), dtype=x_t.dtype)

    def backward(g):
        gp = np.empty_like(diff)
        np.put_along_axis(gp, order_x, diff, 1)
        return [(float(g) * 2.0 / (n * L) * (gp.T @ theta)).astype(x_t.dtype), None]

    return make_result(value, [x_t, y_t], backward, "swd")

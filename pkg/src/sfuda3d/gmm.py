"""Diagonal-covariance Gaussian mixtures over latent vectors.

Two fitting routes exist.  :func:`fit_labeled` builds one Gaussian per class
from labelled vectors (used on source crops, where labels are known) and
:func:`fit_em` runs unlabelled EM (used on target crops).  A
:class:`GmmLibrary` is the collection of per-crop source mixtures that stands
in for the source data during adaptation.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted

from sfuda3d.exceptions import (
    ChecksumError,
    ClassAbsentError,
    DimensionError,
    FormatError,
    LibraryCorruptionError,
    NumericalError,
    ParameterError,
    SamplingError,
)

VARIANCE_FLOOR = 1e-6
LIBRARY_MAGIC = b"SGMM"
LIBRARY_VERSION = 1
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class Gmm:
    """Mixture with one slot per component; absent slots carry zero weight."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    present: np.ndarray
    volume_id: str = ""
    origin: tuple[int, int, int] = (0, 0, 0)
    diagnostics: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        self.present = np.asarray(self.present, dtype=bool)
        self.origin = tuple(int(o) for o in self.origin)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def present_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.present)]

    def component_log_density(self, points: np.ndarray) -> np.ndarray:
        """``log(pi_c) + log N(x | mu_c, diag var_c)`` as an ``(n, K)`` array; absent slots are ``-inf``."""
        points = _points(points, self.dim)
        out = np.full((points.shape[0], self.n_components), -np.inf)
        for c in self.present_classes():
            var = self.variances[c]
            diff = points - self.means[c]
            out[:, c] = (np.log(self.weights[c]) - 0.5 * (self.dim * _LOG_2PI + np.log(var).sum())
                         - 0.5 * (diff * diff / var).sum(axis=1))
        return out

    def score_samples(self, points: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_density(points), axis=1)


def _points(points, dim: int | None = None) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2:
        raise DimensionError(f"points must be an (n, d) array, got shape {points.shape}")
    if dim is not None and points.shape[1] != dim:
        raise DimensionError(f"points have dimension {points.shape[1]}, mixture has {dim}")
    return points


def log_likelihood(g: Gmm, points) -> float:
    """Mean per-point log density."""
    return float(g.score_samples(points).mean())


def em_step(g: Gmm, points: np.ndarray) -> Gmm:
    """One EM iteration over the present components of ``g``."""
    points = _points(points, g.dim)
    logp = g.component_log_density(points)
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    nk = resp.sum(axis=0)
    weights = g.weights.copy()
    means = g.means.copy()
    variances = g.variances.copy()
    for c in g.present_classes():
        if nk[c] <= 1e-12:
            continue
        r = resp[:, c]
        mu = r @ points / nk[c]
        diff = points - mu
        means[c] = mu
        variances[c] = np.maximum(r @ (diff * diff) / nk[c], VARIANCE_FLOOR)
    weights[g.present] = nk[g.present] / points.shape[0]
    weights /= weights.sum()
    return Gmm(weights, means, variances, g.present.copy(), g.volume_id, g.origin)


def fit_labeled(latents, labels, num_classes: int, volume_id: str = "", origin=(0, 0, 0),
                check_refinement: bool = True) -> Gmm:
    """One Gaussian per class present in ``labels`` from per-class sample moments."""
    latents = _points(latents)
    labels = np.asarray(labels).reshape(-1)
    if latents.shape[0] == 0:
        raise ParameterError("fit_labeled needs at least one vector")
    if labels.shape[0] != latents.shape[0]:
        raise DimensionError("latents and labels differ in length")
    dim = latents.shape[1]
    counts = np.bincount(labels, minlength=num_classes)[:num_classes]
    if counts.sum() != labels.size:
        raise ParameterError(f"labels must lie in [0, {num_classes})")
    means = np.zeros((num_classes, dim))
    variances = np.ones((num_classes, dim))
    present = counts > 0
    for c in np.flatnonzero(present):
        x = latents[labels == c]
        means[c] = x.mean(axis=0)
        variances[c] = np.maximum(((x - means[c]) ** 2).mean(axis=0), VARIANCE_FLOOR)
    g = Gmm(counts / counts.sum(), means, variances, present, volume_id, origin)
    if check_refinement:
        before = log_likelihood(g, latents)
        after = log_likelihood(em_step(g, latents), latents)
        if after < before - 1e-9 * max(1.0, abs(before)):
            raise NumericalError(f"EM refinement decreased log-likelihood ({before} -> {after})")
        g.diagnostics.update(log_likelihood=before, refined_log_likelihood=after)
    return g


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def fit_em(points, k: int, tol: float = 1e-4, max_iter: int = 100, seed=0) -> Gmm:
    """Unlabelled EM with k-means++ seeding; ``diagnostics['trace']`` holds the mean log-likelihoods."""
    points = _points(points)
    if k < 1:
        raise ParameterError("k must be >= 1")
    if points.shape[0] < k:
        raise ParameterError(f"need at least k={k} points, got {points.shape[0]}")
    rng = np.random.default_rng(seed)
    dim = points.shape[1]
    spread = np.maximum(points.var(axis=0), VARIANCE_FLOOR)
    g = Gmm(np.full(k, 1.0 / k), kmeans_plus_plus(points, k, rng), np.tile(spread, (k, 1)), np.ones(k, bool))
    trace = [log_likelihood(g, points)]
    converged = False
    for _ in range(max_iter):
        g = em_step(g, points)
        trace.append(log_likelihood(g, points))
        if trace[-1] - trace[-2] < tol * abs(trace[-2]):
            converged = True
            break
    g.present = g.weights > 0
    g.diagnostics.update(trace=trace, converged=converged, dim=dim)
    return g


def chi2_radius(rho: float, dim: int) -> float:
    if not 0.0 < rho <= 1.0:
        raise ParameterError(f"rho must lie in (0, 1], got {rho}")
    return np.inf if rho == 1.0 else float(stats.chi2.ppf(rho, dim))


def sample_class(g: Gmm, c: int, n: int, rho: float = 0.9, seed=0) -> np.ndarray:
    """Draw from class ``c``'s Gaussian, keeping only the central ``rho`` probability mass.

    A draw is accepted iff its squared Mahalanobis radius is within the
    chi-square quantile at ``rho`` for ``dim`` degrees of freedom.
    """
    if c < 0 or c >= g.n_components or not g.present[c]:
        raise ClassAbsentError(f"class {c} is not present in this mixture")
    radius = chi2_radius(rho, g.dim)
    rng = np.random.default_rng(seed)
    out = np.empty((n, g.dim))
    filled, drawn, cap = 0, 0, 1000 * max(n, 1)
    while filled < n:
        if drawn >= cap:
            raise SamplingError(f"rejection sampling exceeded {cap} draws")
        batch = min(max(int(1.2 * (n - filled) / rho) + 16, 64), cap - drawn)
        z = rng.standard_normal((batch, g.dim))
        drawn += batch
        keep = z[(z * z).sum(axis=1) <= radius][: n - filled]
        out[filled:filled + keep.shape[0]] = keep
        filled += keep.shape[0]
    return g.means[c] + np.sqrt(g.variances[c]) * out


def sample_mixture(g: Gmm, n: int, rho: float = 0.9, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """``n`` draws with class proportions ``weights``; returns ``(vectors, classes)``."""
    rng = np.random.default_rng(seed)
    classes = g.present_classes()
    probs = g.weights[classes] / g.weights[classes].sum()
    assign = np.asarray(classes)[rng.choice(len(classes), size=n, p=probs)]
    out = np.empty((n, g.dim))
    for c in classes:
        idx = np.flatnonzero(assign == c)
        if idx.size:
            out[idx] = sample_class(g, c, idx.size, rho, rng)
    return out, assign


@dataclass
class GmmLibrary:
    entries: list[Gmm]
    stride: tuple[int, int, int] = (8, 8, 8)
    checkpoint_hash: str = "0" * 16
    _stacked: tuple | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.entries:
            raise LibraryCorruptionError("a GMM library needs at least one entry")
        dims = {(g.n_components, g.dim) for g in self.entries}
        if len(dims) != 1:
            raise LibraryCorruptionError(f"library entries disagree in shape: {sorted(dims)}")
        self.stride = tuple(int(s) for s in self.stride)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> Gmm:
        return self.entries[i]

    @property
    def dim(self) -> int:
        return self.entries[0].dim

    def stacked(self):
        if self._stacked is None:
            w = np.stack([g.weights for g in self.entries])
            with np.errstate(divide="ignore"):
                logw = np.where(np.stack([g.present for g in self.entries]), np.log(w), -np.inf)
            means = np.stack([g.means for g in self.entries])
            var = np.stack([g.variances for g in self.entries])
            const = -0.5 * (self.dim * _LOG_2PI + np.log(var).sum(axis=2))
            self._stacked = (logw + const, means, 1.0 / var)
        return self._stacked

    def pooled(self) -> Gmm:
        """Per-class moment-matched Gaussian over all entries, weighted by class fraction."""
        k, d = self.entries[0].n_components, self.dim
        w = np.stack([g.weights * g.present for g in self.entries])
        total = w.sum(axis=0)
        means = np.zeros((k, d))
        variances = np.ones((k, d))
        present = total > 0
        for c in np.flatnonzero(present):
            mu = np.stack([g.means[c] for g in self.entries])
            var = np.stack([g.variances[c] for g in self.entries])
            means[c] = w[:, c] @ mu / total[c]
            second = w[:, c] @ (var + mu * mu) / total[c]
            variances[c] = np.maximum(second - means[c] ** 2, VARIANCE_FLOOR)
        return Gmm(total / total.sum(), means, variances, present, "pooled")


def library_log_likelihoods(lib: GmmLibrary, points: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Mean log-likelihood of ``points`` under every entry, shape ``(len(lib),)``."""
    points = _points(points, lib.dim)
    offset, means, inv_var = lib.stacked()
    out = np.empty(len(lib))
    for start in range(0, len(lib), chunk):
        sl = slice(start, start + chunk)
        diff = points[:, None, None, :] - means[None, sl]
        logp = offset[None, sl] - 0.5 * (diff * diff * inv_var[None, sl]).sum(axis=3)
        out[sl] = logsumexp(logp, axis=2).mean(axis=0)
    return out


def match(lib: GmmLibrary, points, subsample: int = 1024, seed=0) -> int:
    """Index of the entry with the largest mean log-likelihood (ties: lowest index)."""
    points = _points(points, lib.dim)
    if points.shape[0] == 0:
        raise ParameterError("cannot match an empty point set")
    # canonical order first, so the subsample does not depend on the input ordering
    points = points[np.lexsort(points.T[::-1])]
    if points.shape[0] > subsample:
        rng = np.random.default_rng(seed)
        points = points[np.sort(rng.choice(points.shape[0], subsample, replace=False))]
    return int(np.argmax(library_log_likelihoods(lib, points)))


def _checksum(blob: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def save_library(lib: GmmLibrary, path) -> None:
    k, d = lib.entries[0].n_components, lib.dim
    buf = bytearray(LIBRARY_MAGIC)
    buf += struct.pack("<BIII", LIBRARY_VERSION, d, k, len(lib))
    buf += struct.pack("<3I", *lib.stride)
    buf += bytes.fromhex(lib.checkpoint_hash.rjust(16, "0")[:16])
    for g in lib.entries:
        vid = g.volume_id.encode("utf-8")
        buf += struct.pack("<H", len(vid)) + vid
        buf += struct.pack("<3I", *g.origin)
        buf += g.present.astype(np.uint8).tobytes()
        buf += g.weights.astype("<f4").tobytes()
        buf += g.means.astype("<f4").tobytes()
        buf += g.variances.astype("<f4").tobytes()
    buf += struct.pack("<Q", _checksum(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_library(path) -> GmmLibrary:
    raw = Path(path).read_bytes()
    if raw[:4] != LIBRARY_MAGIC:
        raise FormatError(f"{path}: not an SGMM library")
    if len(raw) < 4 + 13 + 12 + 8 + 8:
        raise FormatError(f"{path}: truncated library header")
    (stored,) = struct.unpack("<Q", raw[-8:])
    if stored != _checksum(raw[:-8]):
        raise ChecksumError(f"{path}: checksum mismatch")
    version, d, k, count = struct.unpack_from("<BIII", raw, 4)
    if version != LIBRARY_VERSION:
        raise FormatError(f"{path}: unsupported library version {version}")
    pos = 17
    stride = struct.unpack_from("<3I", raw, pos)
    pos += 12
    ckpt = raw[pos:pos + 8].hex()
    pos += 8
    entries = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            vid = raw[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            origin = struct.unpack_from("<3I", raw, pos)
            pos += 12
            present = np.frombuffer(raw, np.uint8, k, pos).astype(bool)
            pos += k
            weights = np.frombuffer(raw, "<f4", k, pos)
            pos += 4 * k
            means = np.frombuffer(raw, "<f4", k * d, pos).reshape(k, d)
            pos += 4 * k * d
            variances = np.frombuffer(raw, "<f4", k * d, pos).reshape(k, d)
            pos += 4 * k * d
            entries.append(Gmm(weights, means, variances, present, vid, origin))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated library payload") from exc
    if pos != len(raw) - 8:
        raise FormatError(f"{path}: trailing bytes after {count} entries")
    return GmmLibrary(entries, stride, ckpt)


class DiagonalGaussianMixture(DensityMixin, BaseEstimator):
    """Estimator front-end for :func:`fit_em`.

    Parameters
    ----------
    n_components : int
        Number of mixture components.
    tol : float
        Stop once the relative gain in mean log-likelihood falls below ``tol``.
    max_iter : int
        EM iteration cap.
    random_state : int
        Seed of the k-means++ initialisation.
    """

    def __init__(self, n_components=1, tol=1e-4, max_iter=100, random_state=0):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.gmm_ = fit_em(X, self.n_components, self.tol, self.max_iter, self.random_state)
        self.weights_, self.means_, self.variances_ = self.gmm_.weights, self.gmm_.means, self.gmm_.variances
        self.lower_bound_trace_ = self.gmm_.diagnostics["trace"]
        self.converged_ = self.gmm_.diagnostics["converged"]
        return self

    def score_samples(self, X):
        check_is_fitted(self, "gmm_")
        return self.gmm_.score_samples(check_array(X, dtype=np.float64))

    def score(self, X, y=None):
        return float(self.score_samples(X).mean())

    def predict(self, X):
        check_is_fitted(self, "gmm_")
        return np.argmax(self.gmm_.component_log_density(check_array(X, dtype=np.float64)), axis=1)


class ClassConditionalGaussian(DensityMixin, BaseEstimator):
    """One diagonal Gaussian per class, fitted from labelled vectors."""

    def __init__(self, num_classes=5, rho=0.9, random_state=0):
        self.num_classes = num_classes
        self.rho = rho
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        self.gmm_ = fit_labeled(X, np.asarray(y, dtype=np.int64), self.num_classes)
        self.weights_, self.means_, self.variances_ = self.gmm_.weights, self.gmm_.means, self.gmm_.variances
        return self

    def score_samples(self, X):
        check_is_fitted(self, "gmm_")
        return self.gmm_.score_samples(check_array(X, dtype=np.float64))

    def score(self, X, y=None):
        return float(self.score_samples(X).mean())

    def sample(self, n_samples=1):
        check_is_fitted(self, "gmm_")
        return sample_mixture(self.gmm_, n_samples, self.rho, self.random_state)

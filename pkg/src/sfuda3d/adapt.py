"""Source training, GMM library extraction and source-free target adaptation."""
from __future__ import annotations

import os
import sys
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sfuda3d import gmm as gmm_mod
from sfuda3d.data.augment import augment
from sfuda3d.data.crops import as_stride, crop_grid, random_crop
from sfuda3d.data.volume import ManifestEntry, load_images, load_pairs
from sfuda3d.exceptions import DataError, LibraryCorruptionError, ParameterError
from sfuda3d.model import (
    ENCODER_PREFIXES,
    DECODER_PREFIXES,
    SegModel,
    classify,
    forward,
    latent,
    latent_points,
    predict_labels,
)
from sfuda3d.numerics import Adam, Tensor, backward, cross_entropy, no_grad
from sfuda3d.rng import subsystem_rng, subsystem_seed
from sfuda3d.swd import PointSet, swd

ABLATIONS = ("none", "no-shape", "no-shape-count")


@dataclass
class TrainConfig:
    patch: int = 32
    epochs: int = 30
    steps_per_epoch: int = 40
    lr: float = 1e-3
    augment_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        _positive(self, "patch", "epochs", "steps_per_epoch", "lr")
        if not 0.0 <= self.augment_p <= 1.0:
            raise ParameterError("augment_p must lie in [0, 1]")


@dataclass
class AdaptConfig:
    patch: int = 32
    stride: tuple[int, int, int] = (8, 8, 8)
    epochs: int = 20
    crops_per_epoch: int = 20
    lr: float = 1e-4
    rho: float = 0.9
    num_projections: int = 128
    match_subsample: int = 1024
    em_tol: float = 1e-4
    em_max_iter: int = 100
    ablation: str = "none"
    seed: int = 0

    def __post_init__(self):
        self.stride = as_stride(self.stride)
        _positive(self, "patch", "crops_per_epoch", "lr", "num_projections",
                  "match_subsample", "em_tol", "em_max_iter")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if not 0.0 < self.rho <= 1.0:
            raise ParameterError(f"rho must lie in (0, 1], got {self.rho}")
        if self.ablation not in ABLATIONS:
            raise ParameterError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")


def _positive(cfg, *names: str) -> None:
    for name in names:
        if not getattr(cfg, name) > 0:
            raise ParameterError(f"{name} must be positive, got {getattr(cfg, name)}")


def _pairs(source) -> list[tuple[np.ndarray, np.ndarray]]:
    source = list(source)
    if not source:
        raise DataError("no labelled source volumes")
    if isinstance(source[0], ManifestEntry):
        return load_pairs(source)
    return [(np.asarray(i, np.float32), np.asarray(l, np.uint8)) for i, l in source]


def _images(target) -> list[np.ndarray]:
    target = list(target)
    if not target:
        raise DataError("no target volumes")
    if isinstance(target[0], ManifestEntry):
        return load_images(target)
    return [np.asarray(v, np.float32) for v in target]


@dataclass
class TrainResult:
    model: SegModel
    loss_curve: list[float]
    wall_times: list[float]


def train_source(model: SegModel, source, cfg: TrainConfig | None = None) -> TrainResult:
    """Cross-entropy training on random augmented crops; ``model`` is updated in place."""
    cfg = cfg or TrainConfig()
    pairs = _pairs(source)
    rng = subsystem_rng(cfg.seed, "train")
    model.set_trainable(None)
    opt = Adam(model.parameters(), lr=cfg.lr)
    curve, times = [], []
    start = time.perf_counter()
    for _ in range(cfg.epochs):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            image, labels = pairs[int(rng.integers(len(pairs)))]
            crop = random_crop(image.shape, cfg.patch, rng).slices()
            x, y = augment(image[crop], labels[crop], rng, cfg.augment_p)
            loss = cross_entropy(forward(model, x), y[None].astype(np.int64))
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(float(loss.item()))
        curve.append(float(np.mean(losses)))
        times.append(time.perf_counter() - start)
    return TrainResult(model, curve, times)


def crop_latents(model: SegModel, patch: np.ndarray) -> np.ndarray:
    with no_grad():
        return latent_points(model, patch).data.astype(np.float64)


def extract_gmm_library(model: SegModel, source, stride=(8, 8, 8), patch: int = 32,
                        ids: list[str] | None = None, checkpoint_hash: str | None = None) -> gmm_mod.GmmLibrary:
    """One class-conditional mixture per crop of every labelled source volume."""
    stride = as_stride(stride)
    source = list(source)
    if ids is None:
        ids = [e.id if isinstance(e, ManifestEntry) else f"vol{i:03d}" for i, e in enumerate(source)]
    pairs = _pairs(source)
    entries = []
    c = model.arch.num_classes
    for vid, (image, labels) in zip(ids, pairs):
        for crop in crop_grid(image.shape, patch, stride):
            sl = crop.slices()
            z = crop_latents(model, image[sl])
            entries.append(gmm_mod.fit_labeled(z, labels[sl].reshape(-1), c, vid, crop.origin))
    return gmm_mod.GmmLibrary(entries, stride, checkpoint_hash or model.parameter_hash())


@dataclass
class BoundaryEstimate:
    labels: np.ndarray
    indices: list[np.ndarray]

    @property
    def counts(self) -> np.ndarray:
        return np.array([ix.size for ix in self.indices])

    @property
    def size(self) -> int:
        return self.labels.size


def estimate_boundary(frozen: SegModel, patch) -> BoundaryEstimate:
    with no_grad():
        prob = classify(frozen, latent(frozen, patch)).data
    labels = predict_labels(prob)[0].reshape(-1)
    return BoundaryEstimate(labels, [np.flatnonzero(labels == c) for c in range(frozen.arch.num_classes)])


def _fallback_class(g: gmm_mod.Gmm, c: int, fallback: gmm_mod.Gmm | None) -> tuple[gmm_mod.Gmm, int]:
    if fallback is not None and c < fallback.n_components and fallback.present[c]:
        return fallback, c
    present = g.present_classes()
    if fallback is not None and c < fallback.n_components:
        ref = fallback.means[fallback.present].mean(axis=0)
    else:
        ref = g.means[present].mean(axis=0)
    return g, present[int(np.argmin(((g.means[present] - ref) ** 2).sum(axis=1)))]


def arrange_pseudo_latents(g: gmm_mod.Gmm, b: BoundaryEstimate, rho: float, rng: np.random.Generator,
                           mode: str = "none", fallback: gmm_mod.Gmm | None = None) -> PointSet:
    """Sample from ``g`` into the voxels of ``b``: class ``c`` fills the ``n_c`` voxels predicted as ``c``.

    ``mode='no-shape'`` keeps the counts but scatters the samples to random
    voxels, and ``mode='no-shape-count'`` ignores ``b`` and draws from the
    whole mixture.  Classes missing from ``g`` borrow ``fallback``'s Gaussian
    for that class, or otherwise the present class nearest to the mean.
    """
    if not g.present.any():
        raise LibraryCorruptionError("matched mixture has no present classes")
    if mode not in ABLATIONS:
        raise ParameterError(f"unknown ablation {mode!r}")
    n = b.size
    out = np.empty((n, g.dim))
    tags = np.empty(n, dtype=np.int64)
    if mode == "no-shape-count":
        out, tags = gmm_mod.sample_mixture(g, n, rho, rng)
        perm = rng.permutation(n)
        return PointSet(Tensor(out[perm]), tags[perm])
    for c, idx in enumerate(b.indices):
        if idx.size == 0:
            continue
        src, k = (g, c) if c < g.n_components and g.present[c] else _fallback_class(g, c, fallback)
        out[idx] = gmm_mod.sample_class(src, k, idx.size, rho, rng)
        tags[idx] = c
    if mode == "no-shape":
        perm = rng.permutation(n)
        out, tags = out[perm], tags[perm]
    return PointSet(Tensor(out), tags)


@dataclass
class StepResult:
    loss: float
    matched: int
    counts: np.ndarray
    target_log_likelihood: float


def adapt_step(model: SegModel, frozen: SegModel, patch: np.ndarray, lib: gmm_mod.GmmLibrary, cfg: AdaptConfig,
               rng: np.random.Generator, optimizer: Adam | None = None, fallback: gmm_mod.Gmm | None = None,
               step_seed: int = 0) -> StepResult:
    """One alignment step of the encoder and decoder towards pseudo-latents from the matched source mixture."""
    if optimizer is None:
        model.set_trainable(ENCODER_PREFIXES + DECODER_PREFIXES)
        optimizer = Adam(model.encoder_decoder_parameters(), lr=cfg.lr)
    z = latent_points(model, patch)
    b = estimate_boundary(frozen, patch)
    points = z.data.astype(np.float64)
    k = int((b.counts > 0).sum())
    sub = points[rng.choice(points.shape[0], min(cfg.match_subsample, points.shape[0]), replace=False)]
    g_t = gmm_mod.fit_em(sub, min(k, sub.shape[0]), cfg.em_tol, cfg.em_max_iter, step_seed)
    j = gmm_mod.match(lib, points, cfg.match_subsample, step_seed)
    pseudo = arrange_pseudo_latents(lib[j], b, cfg.rho, rng, cfg.ablation, fallback)
    loss = swd(z, pseudo, cfg.num_projections, step_seed)
    optimizer.zero_grad()
    backward(loss)
    optimizer.step()
    return StepResult(float(loss.item()), j, b.counts, gmm_mod.log_likelihood(g_t, sub))


@dataclass
class AdaptResult:
    model: SegModel
    swd_trace: list[float]
    wall_times: list[float]
    matched: list[int] = field(default_factory=list)


def adapt(model: SegModel, frozen: SegModel, target, lib: gmm_mod.GmmLibrary, cfg: AdaptConfig | None = None) -> AdaptResult:
    """Adapt ``model`` in place to unlabelled target volumes; ``frozen`` is never modified."""
    cfg = cfg or AdaptConfig()
    images = _images(target)
    if lib.dim != model.arch.num_classes:
        raise LibraryCorruptionError(f"library dimension {lib.dim} does not match model ({model.arch.num_classes})")
    frozen.set_trainable(())
    model.set_trainable(ENCODER_PREFIXES + DECODER_PREFIXES)
    optimizer = Adam(model.encoder_decoder_parameters(), lr=cfg.lr)
    fallback = lib.pooled()
    rng = subsystem_rng(cfg.seed, "adapt")
    base_seed = subsystem_seed(cfg.seed, "swd")
    trace, times, matched = [], [], []
    start = time.perf_counter()
    step = 0
    for _ in range(cfg.epochs):
        losses = []
        for _ in range(cfg.crops_per_epoch):
            image = images[int(rng.integers(len(images)))]
            crop = random_crop(image.shape, cfg.patch, rng).slices()
            result = adapt_step(model, frozen, image[crop], lib, cfg, rng, optimizer, fallback, base_seed + step)
            losses.append(result.loss)
            matched.append(result.matched)
            step += 1
        trace.append(float(np.mean(losses)))
        times.append(time.perf_counter() - start)
    return AdaptResult(model, trace, times, matched)


class IoAudit:
    """Records every file path opened by this process while active."""

    _lock = threading.Lock()
    _active: list["IoAudit"] = []
    _installed = False

    def __init__(self):
        self.paths: list[str] = []

    @classmethod
    def _hook(cls, event: str, args) -> None:
        if event != "open" or not cls._active:
            return
        path = args[0]
        if isinstance(path, int):
            return
        try:
            path = os.path.abspath(os.fsdecode(path))
        except TypeError:
            path = str(path)
        for audit in cls._active:
            audit.paths.append(path)

    @contextmanager
    def record(self):
        with IoAudit._lock:
            if not IoAudit._installed:
                sys.addaudithook(IoAudit._hook)
                IoAudit._installed = True
            IoAudit._active.append(self)
        try:
            yield self
        finally:
            with IoAudit._lock:
                IoAudit._active.remove(self)

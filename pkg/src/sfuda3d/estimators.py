"""Estimator front-ends for the source-training and source-free adaptation phases.

``X`` is a list of preprocessed 3D volumes and ``y`` a list of matching label maps.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from sfuda3d.adapt import AdaptConfig, TrainConfig, adapt, extract_gmm_library, train_source
from sfuda3d.evaluate import evaluate
from sfuda3d.gmm import GmmLibrary
from sfuda3d.model import SegModel, build_model, sliding_window_predict


class _Segmenter(BaseEstimator):
    def predict(self, X):
        check_is_fitted(self, "model_")
        return [sliding_window_predict(self.model_, np.asarray(x), self.patch, self.eval_stride) for x in X]

    def score(self, X, y):
        """Mean foreground Dice over volumes."""
        check_is_fitted(self, "model_")
        return evaluate(self.model_, list(zip(X, y)), self.patch, self.eval_stride).average


class SourceSegmenter(_Segmenter):
    """Train the segmentation network on labelled source volumes, then export a GMM library."""

    def __init__(self, epochs=30, steps_per_epoch=40, lr=1e-3, augment_p=0.5, patch=32, widths=(8, 16, 32),
                 dilations=(1, 2, 4), eval_stride=(8, 8, 8), random_state=0):
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.lr = lr
        self.augment_p = augment_p
        self.patch = patch
        self.widths = widths
        self.dilations = dilations
        self.eval_stride = eval_stride
        self.random_state = random_state

    def fit(self, X, y):
        cfg = TrainConfig(self.patch, self.epochs, self.steps_per_epoch, self.lr, self.augment_p, self.random_state)
        model = build_model(5, self.random_state, tuple(self.widths), tuple(self.dilations))
        result = train_source(model, list(zip(X, y)), cfg)
        self.model_, self.loss_curve_ = result.model, result.loss_curve
        return self

    def extract_library(self, X, y, stride=(8, 8, 8)) -> GmmLibrary:
        check_is_fitted(self, "model_")
        return extract_gmm_library(self.model_, list(zip(X, y)), stride, self.patch,
                                   checkpoint_hash=self.model_.parameter_hash())


class SourceFreeAdapter(_Segmenter):
    """Align a source model's latent distribution on unlabelled target volumes using only a GMM library."""

    def __init__(self, source_model: SegModel | None = None, library: GmmLibrary | None = None, epochs=20,
                 crops_per_epoch=20, lr=1e-4, rho=0.9, num_projections=128, ablation="none", patch=32,
                 eval_stride=(8, 8, 8), random_state=0):
        self.source_model = source_model
        self.library = library
        self.epochs = epochs
        self.crops_per_epoch = crops_per_epoch
        self.lr = lr
        self.rho = rho
        self.num_projections = num_projections
        self.ablation = ablation
        self.patch = patch
        self.eval_stride = eval_stride
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.source_model is None or self.library is None:
            raise ValueError("source_model and library are required")
        cfg = AdaptConfig(patch=self.patch, epochs=self.epochs, crops_per_epoch=self.crops_per_epoch, lr=self.lr,
                          rho=self.rho, num_projections=self.num_projections, ablation=self.ablation,
                          seed=self.random_state)
        result = adapt(self.source_model.copy(), self.source_model.copy(), [np.asarray(x) for x in X],
                       self.library, cfg)
        self.model_, self.swd_trace_ = result.model, result.swd_trace
        return self

"""scikit-learn style wrappers around pre-training and the downstream tasks."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import RunConfig, build_state
from .datapipe import CatalogEntry, DataError, filter_catalog, read_catalog
from .selfsup import pretrain
from .tasks import detect_change, prf1, word_map


def _check_patches(X, bands: int) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[1] != bands:
        raise ValueError(f"expected N x {bands} x h x w patches, got shape {X.shape}")
    if X.shape[2] < 3 or X.shape[3] < 3:
        raise ValueError("patches must be at least 3 x 3")
    return X


def _check_image(img, bands: int) -> np.ndarray:
    img = check_array(img, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if img.ndim != 3 or img.shape[0] != bands:
        raise ValueError(f"expected a {bands} x H x W image, got shape {img.shape}")
    return img


def _catalog(X) -> list:
    if isinstance(X, (str, Path)):
        X = read_catalog(X)
    entries = list(X)
    if not entries or not all(isinstance(e, CatalogEntry) for e in entries):
        raise DataError("fit expects a catalog path or a non-empty list of CatalogEntry")
    return entries


class MatterEncoder(TransformerMixin, BaseEstimator):
    """Self-supervised patch encoder.

    ``fit`` pre-trains on a catalog, ``transform`` maps N x B x h x w patches
    to unit descriptors, ``predict`` returns their visual word indices.
    Hyperparameters mirror :class:`matter.config.RunConfig` keys.
    """

    def __init__(self, n_clusters=64, descriptor_dim=64, in_bands=4, stem_channels=16, block_channels=(16, 32),
                 use_tern=True, use_residual_encoder=True, batch_size=4, learning_rate=0.01, momentum=0.6,
                 weight_decay=0.001, temperature=0.05, train_patch=7, iterations=2000, grad_clip=5.0,
                 negatives="triplet", patches_per_triplet=8, max_per_region=100, window=9, random_state=0):
        self.n_clusters = n_clusters
        self.descriptor_dim = descriptor_dim
        self.in_bands = in_bands
        self.stem_channels = stem_channels
        self.block_channels = block_channels
        self.use_tern = use_tern
        self.use_residual_encoder = use_residual_encoder
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.temperature = temperature
        self.train_patch = train_patch
        self.iterations = iterations
        self.grad_clip = grad_clip
        self.negatives = negatives
        self.patches_per_triplet = patches_per_triplet
        self.max_per_region = max_per_region
        self.window = window
        self.random_state = random_state

    def run_config(self) -> RunConfig:
        return RunConfig(
            seed=int(self.random_state), clusters=self.n_clusters, descriptor_dim=self.descriptor_dim,
            in_bands=self.in_bands, stem_channels=self.stem_channels, block_channels=tuple(self.block_channels),
            use_tern=self.use_tern, use_residual_encoder=self.use_residual_encoder, batch_size=self.batch_size,
            learning_rate=self.learning_rate, momentum=self.momentum, weight_decay=self.weight_decay,
            temperature=self.temperature, train_patch=self.train_patch, iterations=self.iterations,
            grad_clip=self.grad_clip, negatives=self.negatives, patches_per_triplet=self.patches_per_triplet,
            max_per_region=self.max_per_region, window=self.window,
        )

    def fit(self, X, y=None):
        """Pre-train on ``X``: a catalog manifest path or a list of CatalogEntry."""
        cfg = self.run_config()
        catalog = filter_catalog(_catalog(X), cfg.max_per_region)
        if not catalog:
            raise DataError("no catalog entries survive the cloud and coverage filter")
        state = build_state(cfg)
        pretrain(catalog, cfg.train_config(), state)
        self.config_ = cfg
        self.state_ = state
        self.model_ = state.model
        self.loss_curve_ = list(state.losses)
        self.n_iter_ = state.iteration
        return self

    @classmethod
    def from_state(cls, state, cfg: RunConfig) -> "MatterEncoder":
        """Wrap an already trained state, e.g. one restored from a checkpoint."""
        est = cls(n_clusters=cfg.clusters, descriptor_dim=cfg.descriptor_dim, in_bands=cfg.in_bands,
                  stem_channels=cfg.stem_channels, block_channels=cfg.block_channels, use_tern=cfg.use_tern,
                  use_residual_encoder=cfg.use_residual_encoder, batch_size=cfg.batch_size,
                  learning_rate=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                  temperature=cfg.temperature, train_patch=cfg.train_patch, iterations=cfg.iterations,
                  grad_clip=cfg.grad_clip, negatives=cfg.negatives, patches_per_triplet=cfg.patches_per_triplet,
                  max_per_region=cfg.max_per_region, window=cfg.window, random_state=cfg.seed)
        est.config_, est.state_, est.model_ = cfg, state, state.model
        est.loss_curve_, est.n_iter_ = list(state.losses), state.iteration
        return est

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.describe(_check_patches(X, self.in_bands))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.words(_check_patches(X, self.in_bands))

    def word_map(self, image) -> np.ndarray:
        check_is_fitted(self, "model_")
        return word_map(_check_image(image, self.in_bands), self.model_, self.window).words


class ChangeDetector(BaseEstimator):
    """Unsupervised change detection on top of a fitted :class:`MatterEncoder`.

    ``X`` for ``predict``/``decision_function`` is one pair (2 x B x H x W)
    or a sequence of pairs.
    """

    def __init__(self, encoder=None, window=9, bins=256):
        self.encoder = encoder
        self.window = window
        self.bins = bins

    def fit(self, X, y=None):
        enc = self.encoder if self.encoder is not None else MatterEncoder(window=self.window)
        try:
            check_is_fitted(enc, "model_")
        except Exception:
            enc.fit(X)
        self.encoder_ = enc
        return self

    def _pairs(self, X) -> tuple:
        check_is_fitted(self, "encoder_")
        bands = self.encoder_.in_bands
        arr = np.asarray(X, dtype=np.float32) if not isinstance(X, (list, tuple)) else None
        single = arr is not None and arr.ndim == 4
        pairs = [arr] if single else list(X)
        out = []
        for p in pairs:
            a, b = p[0], p[1]
            out.append((_check_image(a, bands), _check_image(b, bands)))
        return out, single

    def _detect(self, X):
        pairs, single = self._pairs(X)
        maps = [detect_change(a, b, self.encoder_.model_, self.window, self.bins) for a, b in pairs]
        return maps, single

    def decision_function(self, X):
        maps, single = self._detect(X)
        scores = [m.score for m in maps]
        return scores[0] if single else scores

    def predict(self, X):
        maps, single = self._detect(X)
        masks = [m.mask for m in maps]
        return masks[0] if single else masks

    def score(self, X, y):
        """Pooled change-class F1 (percent) against ground-truth masks ``y``."""
        pred = self.predict(X)
        if isinstance(pred, np.ndarray):
            pred, y = [pred], [y]
        return prf1(np.concatenate([np.ravel(p) for p in pred]),
                    np.concatenate([np.ravel(np.asarray(t, dtype=bool)) for t in y])).f1

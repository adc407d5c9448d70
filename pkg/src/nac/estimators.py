"""scikit-learn style wrappers around construction and training."""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .arch import NetworkSpec, load_architecture
from .construct import ConstructionConfig, construct
from .data import AugmentPolicy, Dataset
from .engine import ops
from .engine.graph import build_graph
from .train import TrainConfig, Trainer, predict_logits

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _check_images(X, y=None):
    """Validate N x C x H x W image arrays (and labels)."""
    if y is None:
        X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    else:
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, C, H, W), got {X.shape}")
    return X, y


def _resolve_arch(architecture) -> NetworkSpec:
    if isinstance(architecture, NetworkSpec):
        return architecture
    return load_architecture(architecture)


def _augment_policy(augment) -> AugmentPolicy:
    if augment is None or augment is False:
        return AugmentPolicy()
    if isinstance(augment, AugmentPolicy):
        return augment
    if augment == "crop_flip":
        return AugmentPolicy(random_crop_pad=2, random_flip=True)
    if augment == "default":
        return AugmentPolicy.default()
    raise ValueError(f"unknown augment setting {augment!r}")


class EnvelopeNetClassifier(ClassifierMixin, BaseEstimator):
    """Train a fixed architecture from scratch on image arrays.

    Parameters mirror the full-training hyperparameters. ``architecture``
    is a notation string, a path to an architecture document, or a
    ``NetworkSpec``.
    """

    def __init__(self, architecture="32/2-2-2/6", epochs=20, batch_size=64, schedule="cosine",
                 learning_rate=0.05, min_learning_rate=0.001, decay_factor=0.999, decay_period_epochs=20.0,
                 momentum=0.9, weight_decay=3e-4, clip_norm=5.0, augment="crop_flip", dtype="float32",
                 random_state=0):
        self.architecture = architecture
        self.epochs = epochs
        self.batch_size = batch_size
        self.schedule = schedule
        self.learning_rate = learning_rate
        self.min_learning_rate = min_learning_rate
        self.decay_factor = decay_factor
        self.decay_period_epochs = decay_period_epochs
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.augment = augment
        self.dtype = dtype
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, momentum=self.momentum, schedule=self.schedule,
            learning_rate=self.learning_rate, decay_factor=self.decay_factor,
            decay_period_epochs=self.decay_period_epochs, min_learning_rate=self.min_learning_rate,
            weight_decay=self.weight_decay, clip_norm=self.clip_norm, augment=_augment_policy(self.augment),
        )

    def fit(self, X, y):
        X, y = _check_images(X, y)
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        dtype = _DTYPES[self.dtype]
        data = Dataset(X.astype(dtype), codes, len(self.classes_))
        spec = _resolve_arch(self.architecture)
        seed = int(self.random_state or 0)
        self.graph_ = build_graph(spec, data.image_shape, data.class_count, seed=seed, dtype=dtype)
        trainer = Trainer(self.graph_, self.train_config(), seed=seed + 1)
        self.history_ = trainer.fit(data, self.epochs)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "graph_")
        X, _ = _check_images(X)
        return predict_logits(self.graph_, X)

    def predict_proba(self, X):
        return ops.softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        check_is_fitted(self, "graph_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class NACConstructor(BaseEstimator):
    """Grow an architecture from an envelope network; ``fit`` sets ``architecture_`` and ``trace_``."""

    def __init__(self, envelope="32/2-2-2/6", max_iterations=5, truncated_epochs=2, prune_count=6,
                 max_prune_fraction="1/3", stage_construction_mask=(True, True, False),
                 max_layers_per_stage=None, skip_prune_fraction="1/2", statistic="l2", prune_highest=False,
                 batch_size=50, learning_rate=0.04, momentum=0.9, decay_factor=0.999, decay_period_epochs=2.0,
                 dtype="float32", random_state=0):
        self.envelope = envelope
        self.max_iterations = max_iterations
        self.truncated_epochs = truncated_epochs
        self.prune_count = prune_count
        self.max_prune_fraction = max_prune_fraction
        self.stage_construction_mask = stage_construction_mask
        self.max_layers_per_stage = max_layers_per_stage
        self.skip_prune_fraction = skip_prune_fraction
        self.statistic = statistic
        self.prune_highest = prune_highest
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.decay_factor = decay_factor
        self.decay_period_epochs = decay_period_epochs
        self.dtype = dtype
        self.random_state = random_state

    def construction_config(self) -> ConstructionConfig:
        return ConstructionConfig(
            max_iterations=self.max_iterations,
            truncated_epochs=self.truncated_epochs,
            prune_count=self.prune_count,
            max_prune_fraction=Fraction(str(self.max_prune_fraction)),
            stage_construction_mask=self.stage_construction_mask,
            max_layers_per_stage=self.max_layers_per_stage,
            skip_prune_fraction=Fraction(str(self.skip_prune_fraction)),
            seed=int(self.random_state or 0),
            statistic=self.statistic,
            prune_highest=self.prune_highest,
        )

    def fit(self, X, y):
        X, y = _check_images(X, y)
        classes = unique_labels(y)
        dtype = _DTYPES[self.dtype]
        data = Dataset(X.astype(dtype), np.searchsorted(classes, y), len(classes))
        envelope = _resolve_arch(self.envelope)
        train_cfg = TrainConfig.candidate(batch_size=self.batch_size, learning_rate=self.learning_rate,
                                          momentum=self.momentum, decay_factor=self.decay_factor,
                                          decay_period_epochs=self.decay_period_epochs)
        self.architecture_, self.trace_ = construct(envelope, self.construction_config(), data, train_cfg, dtype)
        self.stats_ = [r.stats for r in self.trace_.iterations]
        return self

    def transform(self, X=None):
        """Return the constructed architecture (the learned artefact of this estimator)."""
        check_is_fitted(self, "architecture_")
        return self.architecture_

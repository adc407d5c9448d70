"""Training loop over a built Graph, with optional featuremap statistic collection."""

from __future__ import annotations

import contextlib
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import AugmentPolicy, Dataset, augment, iterate_batches
from .engine import ops
from .engine.checkpoint import load_arrays, save_arrays
from .engine.graph import Graph
from .engine.optim import (
    ConstantRate,
    SGDMomentum,
    cosine_decay,
    exponential_decay,
    gradient_clip_by_norm,
    l2_regularization,
)
from .engine.tensor import no_grad
from .errors import ConfigError
from .fmstat import StatCollector


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    momentum: float = 0.9
    schedule: str = "exponential"
    learning_rate: float = 0.04
    decay_factor: float = 0.999
    decay_period_epochs: float = 2.0
    min_learning_rate: float = 0.001
    weight_decay: float = 0.0
    clip_norm: float | None = None
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.schedule not in ("exponential", "cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def candidate(cls, **overrides) -> TrainConfig:
        """Hyperparameters for the truncated runs inside construction."""
        return cls(**{**dict(batch_size=50, momentum=0.9, schedule="exponential", learning_rate=0.04,
                             decay_factor=0.999, decay_period_epochs=2.0), **overrides})

    @classmethod
    def final(cls, **overrides) -> TrainConfig:
        """Hyperparameters for training a finished CIFAR-10 network."""
        base = dict(batch_size=64, momentum=0.9, schedule="cosine", learning_rate=0.05, min_learning_rate=0.001,
                    decay_period_epochs=20.0, weight_decay=3e-4, clip_norm=5.0,
                    augment=AugmentPolicy(random_crop_pad=4, random_flip=True))
        return cls(**{**base, **overrides})

    def lr_schedule(self) -> Callable[[float], float]:
        if self.schedule == "exponential":
            return exponential_decay(self.learning_rate, self.decay_factor, self.decay_period_epochs)
        if self.schedule == "cosine":
            return cosine_decay(self.learning_rate, self.min_learning_rate, self.decay_period_epochs)
        return ConstantRate(self.learning_rate)

    def to_dict(self) -> dict:
        return asdict(self)


@contextlib.contextmanager
def single_threaded(enabled: bool = True):
    """Pin BLAS to one thread so repeated runs are bit-identical."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


class Trainer:
    def __init__(self, graph: Graph, cfg: TrainConfig, seed: int = 0):
        self.graph = graph
        self.cfg = cfg
        self.graph.bn_momentum = cfg.bn_momentum
        self.optimizer = SGDMomentum(graph.params, cfg.momentum)
        self.rng = np.random.default_rng(seed)
        self.schedule = cfg.lr_schedule()
        self.epoch = 0
        self.history: list[dict] = []

    def train_epoch(self, data: Dataset, collector: StatCollector | None = None) -> float:
        cfg = self.cfg
        n = len(data)
        steps = -(-n // cfg.batch_size)
        total = 0.0
        kernels = self.graph.kernel_params() if cfg.weight_decay else []
        for step, idx in enumerate(iterate_batches(n, cfg.batch_size, self.rng)):
            lr = self.schedule(self.epoch + step / steps)
            x = augment(data.images[idx], cfg.augment, self.rng).astype(self.graph.dtype, copy=False)
            logits = self.graph.forward(x, training=True, rng=self.rng)
            loss = ops.softmax_cross_entropy(logits, data.labels[idx])
            total += float(loss.data) * len(idx)
            if kernels:
                loss = ops.add(loss, l2_regularization(kernels, cfg.weight_decay))
            self.optimizer.zero_grad()
            loss.backward()
            if collector is not None:
                collector.observe(self.graph.taps)
            grads = {k: p.grad for k, p in self.graph.params.items() if p.grad is not None}
            if cfg.clip_norm is not None:
                names = list(grads)
                clipped, _ = gradient_clip_by_norm([grads[k] for k in names], cfg.clip_norm)
                grads = dict(zip(names, clipped))
            self.optimizer.step(lr, grads)
        self.graph.taps = {}
        self.epoch += 1
        if collector is not None:
            collector.end_epoch()
        return total / n

    def fit(self, train: Dataset, epochs: int, test: Dataset | None = None,
            collector: StatCollector | None = None, on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
        for _ in range(epochs):
            t0 = time.perf_counter()
            loss = self.train_epoch(train, collector)
            row = {"epoch": self.epoch, "train_loss": loss, "lr": self.schedule(self.epoch - 1),
                   "seconds": time.perf_counter() - t0}
            if test is not None:
                row["test_loss"], row["test_error"] = evaluate(self.graph, test)
            self.history.append(row)
            if on_epoch is not None:
                on_epoch(row)
        return self.history

    # ----------------------------------------------------------------- checkpoints

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        arrays = {f"param:{k}": p.data for k, p in self.graph.params.items()}
        arrays.update({f"buffer:{k}": v for k, v in self.graph.buffers.items()})
        arrays.update({f"velocity:{k}": v for k, v in self.optimizer.velocity.items()})
        meta = {"epoch": self.epoch, "rng_state": self.rng.bit_generator.state, "history": self.history,
                **(extra or {})}
        return save_arrays(path, arrays, _jsonable(meta))

    def load(self, path: str | Path) -> dict:
        arrays, meta = load_arrays(path)
        load_weights(self.graph, arrays)
        for k, v in self.optimizer.velocity.items():
            v[...] = arrays[f"velocity:{k}"]
        self.epoch = int(meta.get("epoch", 0))
        if "rng_state" in meta:
            self.rng.bit_generator.state = meta["rng_state"]
        self.history = list(meta.get("history", []))
        return meta


def load_weights(graph: Graph, arrays: dict[str, np.ndarray]) -> None:
    for k, p in graph.params.items():
        key = f"param:{k}"
        if key not in arrays:
            raise KeyError(f"checkpoint lacks parameter {k!r}")
        if arrays[key].shape != p.data.shape:
            raise ValueError(f"parameter {k!r}: checkpoint shape {arrays[key].shape} != {p.data.shape}")
        p.data = arrays[key].astype(p.data.dtype)
    for k, v in graph.buffers.items():
        v[...] = arrays[f"buffer:{k}"]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def predict_logits(graph: Graph, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for lo in range(0, len(images), batch_size):
            x = images[lo : lo + batch_size].astype(graph.dtype, copy=False)
            out.append(graph.forward(x, training=False).data)
    graph.taps = {}
    return np.concatenate(out)


def evaluate(graph: Graph, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Return (mean cross-entropy, error rate) with batchnorm in inference mode."""
    logits = predict_logits(graph, data.images, batch_size).astype(np.float64)
    lsm = ops.log_softmax(logits)
    loss = float(-lsm[np.arange(len(data)), data.labels].mean())
    error = float(np.mean(logits.argmax(axis=1) != data.labels))
    return loss, error

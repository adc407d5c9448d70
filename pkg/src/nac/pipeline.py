"""Glue shared by the command line and the estimators: datasets, artifacts, full training."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch import NetworkSpec, serialize
from .config import DataSection, RunConfig
from .construct import ConstructionTrace
from .data import Dataset, load_cifar10, synthetic_blobs
from .engine.graph import build_graph
from .fmstat import HISTORY_COLUMNS, STATS_COLUMNS, stats_rows, write_csv
from .train import TrainConfig, Trainer, evaluate

DTYPES = {"float32": np.float32, "float64": np.float64}


def load_datasets(section: DataSection, seed: int = 0) -> tuple[Dataset, Dataset]:
    """(train, test) for the configured source."""
    if section.dataset == "cifar10":
        if section.data_dir is None:
            raise FileNotFoundError("cifar10 needs data_dir")
        train = load_cifar10(section.data_dir, "train", section.limit)
        test = load_cifar10(section.data_dir, "test", section.test_limit)
        return train, test
    common = dict(classes=section.classes, hw=section.image_size, noise_sigma=section.noise_sigma,
                  jitter=section.jitter)
    train = synthetic_blobs(n_per_class=section.train_per_class, seed=seed, split="train", **common)
    test = synthetic_blobs(n_per_class=section.test_per_class, seed=seed + 10_007, split="test", **common)
    if section.limit is not None:
        train = train.subset(slice(0, section.limit))
    if section.test_limit is not None:
        test = test.subset(slice(0, section.test_limit))
    return train, test


def write_construction(out: Path, net: NetworkSpec, trace: ConstructionTrace, deterministic: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "architecture.json").write_text(serialize(net))
    (out / "trace.jsonl").write_text(trace.to_jsonl(include_timing=not deterministic))
    (out / "timings.jsonl").write_text(
        "".join(json.dumps({"iteration": r.iteration, **r.timing}) + "\n" for r in trace.iterations)
    )
    rows = [row for r in trace.iterations for row in stats_rows(r.iteration, r.stats or {})]
    write_csv(out / "stats.csv", STATS_COLUMNS, rows)
    hist = [
        {"iteration": r.iteration, "step": s, "block_id": bid, "running_l2": repr(v)}
        for r in trace.iterations for s, bid, v in (r.step_history or ())
    ]
    write_csv(out / "history.csv", ("iteration",) + HISTORY_COLUMNS, hist)


@dataclass
class TrainResult:
    history: list[dict]
    test_loss: float
    test_error: float
    seconds: float
    parameters: int

    @property
    def test_accuracy(self) -> float:
        return 1.0 - self.test_error


def train_network(net: NetworkSpec, train: Dataset, test: Dataset, epochs: int, cfg: TrainConfig,
                  seed: int = 0, dtype=np.float32, evaluate_each_epoch: bool = False) -> TrainResult:
    """Train from fresh parameters and report final test metrics."""
    graph = build_graph(net, train.image_shape, train.class_count, seed=seed, dtype=dtype)
    trainer = Trainer(graph, cfg, seed=seed + 1)
    t0 = time.perf_counter()
    trainer.fit(train, epochs, test if evaluate_each_epoch else None)
    seconds = time.perf_counter() - t0
    loss, err = evaluate(graph, test)
    return TrainResult(trainer.history, loss, err, seconds, graph.parameter_count())


def run_dtype(cfg: RunConfig):
    return DTYPES[cfg.dtype]

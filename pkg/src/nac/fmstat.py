"""Per-filter featuremap statistics accumulated during training.

The primary signal is the squared l2 norm of a block's output featuremap,
normalised by the featuremap element count, summed over every image seen.
Records are mergeable: accumulating two disjoint image sets and merging
gives the same record as accumulating their union.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ShapeError


class EmptyRecordError(ValueError):
    pass


@dataclass
class FeaturemapStatRecord:
    block_id: str
    stage_index: int
    layer_index: int
    kind: str = ""
    sum_sq_l2: float = 0.0
    elem_sum: np.ndarray | None = None
    elem_sum_sq: np.ndarray | None = None
    sample_count: int = 0
    history: list[float] = field(default_factory=list)

    def observe(self, featuremap: np.ndarray) -> FeaturemapStatRecord:
        """Accumulate one batch of post-activation block outputs (B x ...)."""
        fm = np.asarray(featuremap, dtype=np.float64)
        if fm.ndim < 2:
            raise ShapeError("featuremap must have a leading batch axis")
        if self.elem_sum is not None and fm.shape[1:] != self.elem_sum.shape:
            raise ShapeError(
                f"block {self.block_id}: featuremap shape {fm.shape[1:]} != earlier {self.elem_sum.shape}"
            )
        sq = fm * fm
        self.sum_sq_l2 += float(sq.reshape(len(fm), -1).mean(axis=1).sum())
        if self.elem_sum is None:
            self.elem_sum = fm.sum(axis=0)
            self.elem_sum_sq = sq.sum(axis=0)
        else:
            self.elem_sum += fm.sum(axis=0)
            self.elem_sum_sq += sq.sum(axis=0)
        self.sample_count += len(fm)
        return self

    def snapshot(self) -> None:
        self.history.append(mean_statistic(self))

    def copy(self) -> FeaturemapStatRecord:
        return FeaturemapStatRecord(
            self.block_id, self.stage_index, self.layer_index, self.kind, self.sum_sq_l2,
            None if self.elem_sum is None else self.elem_sum.copy(),
            None if self.elem_sum_sq is None else self.elem_sum_sq.copy(),
            self.sample_count, list(self.history),
        )


def observe(record: FeaturemapStatRecord, featuremap: np.ndarray) -> FeaturemapStatRecord:
    return record.copy().observe(featuremap)


def merge(a: FeaturemapStatRecord, b: FeaturemapStatRecord) -> FeaturemapStatRecord:
    if a.block_id != b.block_id:
        raise ValueError(f"cannot merge records of {a.block_id!r} and {b.block_id!r}")
    if a.elem_sum is None:
        return b.copy()
    if b.elem_sum is None:
        return a.copy()
    if a.elem_sum.shape != b.elem_sum.shape:
        raise ShapeError("cannot merge records with different featuremap shapes")
    return FeaturemapStatRecord(
        a.block_id, a.stage_index, a.layer_index, a.kind,
        a.sum_sq_l2 + b.sum_sq_l2,
        a.elem_sum + b.elem_sum,
        a.elem_sum_sq + b.elem_sum_sq,
        a.sample_count + b.sample_count,
    )


def mean_statistic(record: FeaturemapStatRecord) -> float:
    if record.sample_count == 0:
        raise EmptyRecordError(f"record for {record.block_id!r} has no samples")
    return record.sum_sq_l2 / record.sample_count


def variance_statistic(record: FeaturemapStatRecord) -> float:
    """Mean over featuremap elements of the per-element variance across images."""
    if record.sample_count == 0:
        raise EmptyRecordError(f"record for {record.block_id!r} has no samples")
    n = record.sample_count
    mu = record.elem_sum / n
    var = np.maximum(record.elem_sum_sq / n - mu * mu, 0.0)
    return float(var.mean())


STATISTICS = {"l2": mean_statistic, "variance": variance_statistic}


def rank_filters(
    records: Iterable[FeaturemapStatRecord] | Mapping[str, FeaturemapStatRecord],
    stage_index: int,
    key: str = "l2",
    descending: bool = False,
) -> list[tuple[str, float]]:
    """Blocks of one stage ordered by statistic (ascending unless ``descending``).

    Ties go to the lower layer index, then the lexicographically smaller id.
    """
    if isinstance(records, Mapping):
        records = records.values()
    stat = STATISTICS[key]
    rows = [(stat(r), r.layer_index, r.block_id) for r in records if r.stage_index == stage_index]
    if not rows:
        raise EmptyRecordError(f"no records for stage {stage_index}")
    sign = -1.0 if descending else 1.0
    rows.sort(key=lambda t: (sign * t[0], t[1], t[2]))
    return [(bid, s) for s, _, bid in rows]


class StatCollector:
    """Owns one record per block and feeds it from a graph's block taps."""

    def __init__(self, blocks, record_steps: bool = False):
        self.records: dict[str, FeaturemapStatRecord] = {
            bid: FeaturemapStatRecord(bid, info.stage, info.layer, info.kind.value) for bid, info in blocks.items()
        }
        self.record_steps = record_steps
        self.steps: list[tuple[int, str, float]] = []
        self.step = 0

    def observe(self, taps: Mapping[str, object]) -> None:
        for bid, t in taps.items():
            rec = self.records.get(bid)
            if rec is not None:
                rec.observe(getattr(t, "data", t))
        self.step += 1
        if self.record_steps:
            for bid, rec in self.records.items():
                self.steps.append((self.step, bid, mean_statistic(rec)))

    def end_epoch(self) -> None:
        for rec in self.records.values():
            if rec.sample_count:
                rec.snapshot()

    def snapshot_records(self) -> dict[str, FeaturemapStatRecord]:
        return {k: r.copy() for k, r in self.records.items()}


STATS_COLUMNS = ("iteration", "stage", "layer", "block_id", "kind", "samples", "l2_stat", "var_stat")
HISTORY_COLUMNS = ("step", "block_id", "running_l2")


def stats_rows(iteration: int, records: Mapping[str, FeaturemapStatRecord]) -> list[dict]:
    rows = []
    for rec in sorted(records.values(), key=lambda r: (r.stage_index, r.layer_index, r.block_id)):
        rows.append({
            "iteration": iteration, "stage": rec.stage_index, "layer": rec.layer_index,
            "block_id": rec.block_id, "kind": rec.kind, "samples": rec.sample_count,
            "l2_stat": repr(mean_statistic(rec)), "var_stat": repr(variance_statistic(rec)),
        })
    return rows


def write_csv(path: str | Path, columns, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row if isinstance(row, dict) else dict(zip(columns, row)))
    return path

"""The prune/expand construction loop over an EnvelopeNet.

Each iteration trains the current network from fresh parameters for a
truncated budget while accumulating featuremap statistics, then for every
stage enabled in the construction mask: prunes the lowest-statistic blocks,
halves the skip connections by learned weight, and appends a fresh
envelope cell at the deepest end of the stage.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .arch import (
    Block,
    BlockKind,
    Layer,
    NetworkSpec,
    SkipConnection,
    Stage,
    block_channels,
    count_parameters,
    make_block_id,
    validate,
)
from .data import Dataset
from .engine.graph import build_graph
from .errors import ConfigError
from .fmstat import FeaturemapStatRecord, StatCollector, rank_filters
from .train import TrainConfig, Trainer


def as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1000)
    return Fraction(value)


@dataclass(frozen=True)
class ConstructionConfig:
    max_iterations: int = 5
    truncated_epochs: int = 10
    prune_count: int = 6
    max_prune_fraction: Fraction = Fraction(1, 3)
    stage_construction_mask: tuple[bool, ...] | None = None
    max_layers_per_stage: tuple[int, ...] | None = None
    envelope_cell: tuple[BlockKind, ...] | None = None
    skip_prune_fraction: Fraction = Fraction(1, 2)
    seed: int = 0
    statistic: str = "l2"
    prune_highest: bool = False
    record_history: bool = False

    def __post_init__(self):
        object.__setattr__(self, "max_prune_fraction", as_fraction(self.max_prune_fraction))
        object.__setattr__(self, "skip_prune_fraction", as_fraction(self.skip_prune_fraction))
        if self.stage_construction_mask is not None:
            object.__setattr__(self, "stage_construction_mask", tuple(bool(m) for m in self.stage_construction_mask))
        if self.max_layers_per_stage is not None:
            object.__setattr__(self, "max_layers_per_stage", tuple(int(m) for m in self.max_layers_per_stage))
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if self.truncated_epochs < 1:
            raise ConfigError("truncated_epochs must be >= 1")
        if self.prune_count < 1:
            raise ConfigError("prune_count must be >= 1")
        if not 0 <= self.max_prune_fraction <= 1 or not 0 <= self.skip_prune_fraction <= 1:
            raise ConfigError("prune fractions must lie in [0, 1]")
        if self.statistic not in ("l2", "variance"):
            raise ConfigError(f"unknown statistic {self.statistic!r}")

    def mask_for(self, net: NetworkSpec) -> tuple[bool, ...]:
        mask = self.stage_construction_mask or (True,) * len(net.stages)
        if len(mask) != len(net.stages):
            raise ConfigError(f"stage mask has {len(mask)} entries for {len(net.stages)} stages")
        return mask

    def max_layers_for(self, net: NetworkSpec) -> tuple[int | None, ...]:
        if self.max_layers_per_stage is None:
            return (None,) * len(net.stages)
        if len(self.max_layers_per_stage) != len(net.stages):
            raise ConfigError(
                f"max_layers_per_stage has {len(self.max_layers_per_stage)} entries for {len(net.stages)} stages"
            )
        return self.max_layers_per_stage


class ConstructionError(RuntimeError):
    def __init__(self, message: str, phase: str, trace: ConstructionTrace):
        super().__init__(f"{phase}: {message}")
        self.phase = phase
        self.trace = trace


@dataclass
class IterationRecord:
    iteration: int
    depths_before: list[int]
    depths_after: list[int]
    blocks_before: int
    blocks_after: int
    params_before: int
    params_after: int
    prune_budget: dict[int, int] = field(default_factory=dict)
    pruned: list[dict] = field(default_factory=list)
    skips_before: dict[int, int] = field(default_factory=dict)
    skips_after_prune: dict[int, int] = field(default_factory=dict)
    pruned_skips: list[dict] = field(default_factory=list)
    added: list[dict] = field(default_factory=list)
    capped: list[int] = field(default_factory=list)
    train_loss: float = float("nan")
    timing: dict[str, float] = field(default_factory=dict)
    # in-memory only
    trained_spec: NetworkSpec | None = None
    stats: dict[str, FeaturemapStatRecord] | None = None
    step_history: list[tuple[int, str, float]] | None = None

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "iteration": self.iteration,
            "depths_before": self.depths_before,
            "depths_after": self.depths_after,
            "blocks_before": self.blocks_before,
            "blocks_after": self.blocks_after,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "prune_budget": {str(k): v for k, v in self.prune_budget.items()},
            "pruned": self.pruned,
            "skips_before": {str(k): v for k, v in self.skips_before.items()},
            "skips_after_prune": {str(k): v for k, v in self.skips_after_prune.items()},
            "pruned_skips": self.pruned_skips,
            "added": self.added,
            "capped": self.capped,
            "train_loss": self.train_loss,
        }
        if include_timing:
            out["timing"] = self.timing
        return out


@dataclass
class ConstructionTrace:
    iterations: list[IterationRecord] = field(default_factory=list)
    truncated_epochs: int = 0

    def __len__(self) -> int:
        return len(self.iterations)

    def to_jsonl(self, include_timing: bool = True) -> str:
        return "".join(json.dumps(r.to_dict(include_timing), sort_keys=True) + "\n" for r in self.iterations)

    @property
    def train_seconds(self) -> float:
        return sum(r.timing.get("train", 0.0) for r in self.iterations)

    @property
    def alg_seconds(self) -> float:
        return sum(r.timing.get("alg", 0.0) for r in self.iterations)


# --------------------------------------------------------------------------- stage edits


def prune_budget(stage: Stage, cfg: ConstructionConfig) -> int:
    return min(cfg.prune_count, math.floor(cfg.max_prune_fraction * stage.block_count))


def prune_filters(stage: Stage, ranked: Sequence[tuple[str, float]], cfg: ConstructionConfig
                  ) -> tuple[Stage, list[dict]]:
    """Remove blocks in ranking order up to the stage budget, never emptying a layer."""
    where = {b.block_id: (li, b) for li, layer in enumerate(stage.layers) for b in layer.blocks}
    if sorted(bid for bid, _ in ranked) != sorted(where):
        raise ValueError("ranking must cover exactly the stage's blocks")
    budget = prune_budget(stage, cfg)
    widths = [layer.width for layer in stage.layers]
    removed: dict[str, dict] = {}
    for bid, stat in ranked:
        if len(removed) >= budget:
            break
        li, blk = where[bid]
        if widths[li] == 1:
            continue
        widths[li] -= 1
        removed[bid] = {"block_id": bid, "layer": li, "kind": blk.kind.value, "stat": stat}
    layers = tuple(Layer(tuple(b for b in layer.blocks if b.block_id not in removed)) for layer in stage.layers)
    return replace(stage, layers=layers), list(removed.values())


def prune_skip_connections(stage: Stage, fraction) -> tuple[Stage, list[SkipConnection]]:
    """Keep the ceil(k * (1 - fraction)) skips with the largest |weight|."""
    fraction = as_fraction(fraction)
    k = len(stage.skip_connections)
    if k == 0:
        return stage, []
    keep_n = math.ceil(k * (1 - fraction))
    ordered = sorted(stage.skip_connections, key=lambda s: (-abs(s.weight), s.src_layer, s.dst_layer))
    kept = set((s.src_layer, s.dst_layer) for s in ordered[:keep_n])
    survivors = tuple(s for s in stage.skip_connections if (s.src_layer, s.dst_layer) in kept)
    dropped = [s for s in stage.skip_connections if (s.src_layer, s.dst_layer) not in kept]
    return replace(stage, skip_connections=survivors), dropped


def add_cell(
    stage: Stage,
    envelope_cell: Sequence[BlockKind],
    stage_index: int,
    stage_width: int,
    generation: int,
    max_layers: int | None = None,
) -> tuple[Stage, bool]:
    """Append a full envelope cell as the new deepest layer, wired to all earlier layers.

    Returns the stage unchanged (and False) when it is already at ``max_layers``.
    """
    if max_layers is not None and stage.depth >= max_layers:
        return stage, False
    ch = block_channels(stage_width, len(envelope_cell))
    new = Layer(tuple(Block(kind, make_block_id(stage_index, f"g{generation}", i), ch)
                      for i, kind in enumerate(envelope_cell)))
    d = stage.depth
    skips = stage.skip_connections + tuple(SkipConnection(i, d, 1.0) for i in range(d - 1))
    return Stage(stage.layers + (new,), skips), True


def with_trained_skip_weights(stage: Stage, stage_index: int, weights: dict[tuple[int, int, int], float]) -> Stage:
    skips = tuple(
        replace(s, weight=weights.get((stage_index, s.src_layer, s.dst_layer), s.weight))
        for s in stage.skip_connections
    )
    return replace(stage, skip_connections=skips)


# --------------------------------------------------------------------------- the loop


def iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def short_train(
    net: NetworkSpec,
    data: Dataset,
    epochs: int,
    train_cfg: TrainConfig,
    seed: int,
    dtype=np.float32,
    record_history: bool = False,
):
    """Fresh-parameter truncated training; returns (graph, collector, trainer)."""
    graph = build_graph(net, data.image_shape, data.class_count, seed=seed, dtype=dtype)
    collector = StatCollector(graph.blocks, record_steps=record_history)
    trainer = Trainer(graph, train_cfg, seed=seed + 1)
    trainer.fit(data, epochs, collector=collector)
    return graph, collector, trainer


def construct(
    envelope: NetworkSpec,
    cfg: ConstructionConfig,
    data: Dataset,
    train_cfg: TrainConfig | None = None,
    dtype=np.float32,
    on_iteration: Callable[[IterationRecord], None] | None = None,
) -> tuple[NetworkSpec, ConstructionTrace]:
    problems = validate(envelope)
    if problems:
        raise ValueError("invalid envelope: " + "; ".join(problems))
    if len(data) == 0:
        raise ValueError("dataset is empty")
    train_cfg = train_cfg or TrainConfig.candidate()
    mask = cfg.mask_for(envelope)
    caps = cfg.max_layers_for(envelope)
    cell = tuple(cfg.envelope_cell or envelope.envelope_cell)
    shape = data.image_shape
    trace = ConstructionTrace(truncated_epochs=cfg.truncated_epochs)
    net = envelope
    for it in range(cfg.max_iterations):
        phase = "train"
        try:
            t0 = time.perf_counter()
            graph, collector, trainer = short_train(
                net, data, cfg.truncated_epochs, train_cfg, iteration_seed(cfg.seed, it), dtype, cfg.record_history
            )
            t1 = time.perf_counter()
            phase = "restructure"
            rec = IterationRecord(
                iteration=it,
                depths_before=[st.depth for st in net.stages],
                depths_after=[],
                blocks_before=net.block_count,
                blocks_after=0,
                params_before=count_parameters(net, shape),
                params_after=0,
                train_loss=trainer.history[-1]["train_loss"],
                trained_spec=net,
                stats=collector.snapshot_records(),
                step_history=collector.steps if cfg.record_history else None,
            )
            weights = graph.skip_weights()
            for si, stage in enumerate(net.stages):
                if not mask[si]:
                    continue
                stage = with_trained_skip_weights(stage, si, weights)
                ranked = rank_filters(collector.records, si, cfg.statistic, descending=cfg.prune_highest)
                rec.prune_budget[si] = prune_budget(stage, cfg)
                stage, pruned = prune_filters(stage, ranked, cfg)
                rec.pruned += [{"stage": si, **p} for p in pruned]
                rec.skips_before[si] = len(stage.skip_connections)
                stage, dropped = prune_skip_connections(stage, cfg.skip_prune_fraction)
                rec.skips_after_prune[si] = len(stage.skip_connections)
                rec.pruned_skips += [{"stage": si, "src": s.src_layer, "dst": s.dst_layer, "weight": s.weight}
                                     for s in dropped]
                stage, added = add_cell(stage, cell, si, net.stage_width(si), it + 1, caps[si])
                if added:
                    rec.added.append({"stage": si, "layer": stage.depth - 1})
                else:
                    rec.capped.append(si)
                net = net.with_stage(si, stage)
            problems = validate(net)
            if problems:
                raise RuntimeError("; ".join(problems))
            rec.depths_after = [st.depth for st in net.stages]
            rec.blocks_after = net.block_count
            rec.params_after = count_parameters(net, shape)
            rec.timing = {"train": t1 - t0, "alg": time.perf_counter() - t1}
        except Exception as exc:
            raise ConstructionError(str(exc), f"iteration {it} {phase}", trace) from exc
        trace.iterations.append(rec)
        if on_iteration is not None:
            on_iteration(rec)
    return net, trace


@dataclass(frozen=True)
class CostReport:
    iterations: int
    truncated_epochs: int
    full_epochs: int
    f: float
    predicted_multiplier: float
    measured_construct_train_seconds: float
    measured_alg_seconds: float
    full_train_seconds: float
    predicted_construct_train_seconds: float
    predicted_total_seconds: float

    @property
    def construct_ratio(self) -> float:
        """Measured over predicted construction-phase training time."""
        if self.predicted_construct_train_seconds == 0:
            return float("nan")
        return self.measured_construct_train_seconds / self.predicted_construct_train_seconds

    def to_dict(self) -> dict:
        return {**self.__dict__, "construct_ratio": self.construct_ratio}

    def summary(self) -> str:
        return (
            f"N={self.iterations} f={self.f:.3g} ({self.truncated_epochs}/{self.full_epochs} epochs): "
            f"predicted (N*f+1) = {self.predicted_multiplier:.3g} x t_train; "
            f"construction training {self.measured_construct_train_seconds:.2f}s "
            f"(model {self.predicted_construct_train_seconds:.2f}s), algorithm {self.measured_alg_seconds:.3f}s"
        )


def construction_cost(trace: ConstructionTrace, t_train_full: float, full_epochs: int,
                      truncated_epochs: int | None = None) -> CostReport:
    """Compare measured phase times with the (N*f + 1) * t_train model."""
    n = len(trace)
    te = truncated_epochs if truncated_epochs is not None else trace.truncated_epochs
    f = te / full_epochs
    return CostReport(
        iterations=n,
        truncated_epochs=te,
        full_epochs=full_epochs,
        f=f,
        predicted_multiplier=n * f + 1,
        measured_construct_train_seconds=trace.train_seconds,
        measured_alg_seconds=trace.alg_seconds,
        full_train_seconds=t_train_full,
        predicted_construct_train_seconds=n * f * t_train_full,
        predicted_total_seconds=(n * f + 1) * t_train_full,
    )

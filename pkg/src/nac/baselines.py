"""Comparison networks: random equivalents of a target and the worst-case construction."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .arch import Block, Layer, NetworkSpec, Stage, block_channels, dense_skips, make_block_id, validate
from .construct import ConstructionConfig, construct


class InfeasibleError(ValueError):
    pass


def random_equivalent(target: NetworkSpec, seed: int = 0, block_counts: Sequence[int] | None = None) -> NetworkSpec:
    """Same stage depths and per-stage block totals as ``target``, random kinds and placement.

    Every layer first receives one block of a uniformly drawn kind; the
    remaining blocks then go to independently drawn (layer, kind) pairs.
    Skips follow the dense initial policy. ``block_counts`` overrides the
    per-stage totals.
    """
    problems = validate(target)
    if problems:
        raise ValueError("invalid target: " + "; ".join(problems))
    if block_counts is not None and len(block_counts) != len(target.stages):
        raise ValueError(f"block_counts has {len(block_counts)} entries for {len(target.stages)} stages")
    rng = np.random.default_rng(seed)
    kinds = tuple(target.envelope_cell)
    stages = []
    for si, stage in enumerate(target.stages):
        depth = stage.depth
        total = stage.block_count if block_counts is None else int(block_counts[si])
        if total < depth:
            raise InfeasibleError(f"stage {si}: {total} blocks cannot fill {depth} layers")
        chosen = [[int(rng.integers(len(kinds)))] for _ in range(depth)]
        for _ in range(total - depth):
            chosen[int(rng.integers(depth))].append(int(rng.integers(len(kinds))))
        ch = block_channels(target.stage_width(si), len(kinds))
        layers = tuple(
            Layer(tuple(Block(kinds[k], make_block_id(si, f"r{li}", bi), ch) for bi, k in enumerate(sorted(ks))))
            for li, ks in enumerate(chosen)
        )
        stages.append(Stage(layers, dense_skips(depth)))
    return replace(target, stages=tuple(stages))


def worst_case_construct(envelope: NetworkSpec, cfg: ConstructionConfig, data, train_cfg=None, **kwargs):
    """Run construction but prune the highest-statistic blocks first."""
    return construct(envelope, replace(cfg, prune_highest=True), data, train_cfg, **kwargs)

"""Shared generators for tests."""

import numpy as np

from nac.arch import (
    ENVELOPE_KINDS,
    Block,
    ClassifierSpec,
    Layer,
    NetworkSpec,
    SkipConnection,
    Stage,
    StemLayer,
    StemSpec,
    block_channels,
)

# Lines written by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def random_spec(rng: np.random.Generator, max_stages=3, max_depth=4, max_width=4) -> NetworkSpec:
    """A valid, generally non-uniform network with random skips and skip weights."""
    m = int(rng.integers(1, len(ENVELOPE_KINDS) + 1))
    cell = ENVELOPE_KINDS[:m]
    c = int(rng.integers(1, 9))
    stages = []
    for si in range(int(rng.integers(1, max_stages + 1))):
        depth = int(rng.integers(1, max_depth + 1))
        ch = block_channels(c * 2**si, m)
        layers = []
        for li in range(depth):
            kinds = rng.choice(m, size=int(rng.integers(1, max_width + 1)))
            layers.append(Layer(tuple(Block(cell[k], f"s{si}x{li}b{bi}", ch) for bi, k in enumerate(kinds))))
        pairs = [(i, j) for j in range(depth) for i in range(j)]
        keep = [p for p in pairs if rng.random() < 0.5]
        skips = tuple(SkipConnection(i, j, float(rng.normal())) for i, j in keep)
        stages.append(Stage(tuple(layers), skips))
    stem = StemSpec((StemLayer(int(rng.choice([1, 3, 5])), c, 1),))
    return NetworkSpec(c, tuple(stages), cell, stem, ClassifierSpec(float(rng.uniform(0.1, 1.0)), int(rng.integers(2, 12))))

"""Linear single-layer model of filter pruning.

A layer of n convolution filters is applied to m images. Each filter is
written as an explicit Toeplitz operator W_k on the vectorised image, so a
filter's output on image i is W_k x_i. Pruning replaces a filter by the
all-zero filter. Branch outputs are either concatenated or summed.

With concatenation, the squared error introduced by pruning filter set S is
exactly the summed energy of those branches, so ranking by the energy
statistic always picks the minimum-error prune. With summation, cross terms
between pruned branches can break that ordering once |S| >= 2.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate

MODES = ("concat", "sum")


@dataclass(frozen=True)
class LinearLayerInstance:
    kernels: np.ndarray  # n x C x k x k
    images: np.ndarray  # m x C x H x W
    mode: str = "concat"

    def __post_init__(self):
        kernels = np.asarray(self.kernels, dtype=np.float64)
        images = np.asarray(self.images, dtype=np.float64)
        if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3] or kernels.shape[2] % 2 == 0:
            raise ValueError(f"kernels must be n x C x k x k with odd k, got {kernels.shape}")
        if images.ndim != 4 or len(images) < 1:
            raise ValueError(f"images must be m x C x H x W with m >= 1, got {images.shape}")
        if images.shape[1] != kernels.shape[1]:
            raise ValueError("kernel and image channel counts differ")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "images", images)

    @property
    def n(self) -> int:
        return len(self.kernels)

    @property
    def m(self) -> int:
        return len(self.images)


def toeplitz(kernel: np.ndarray, height: int, width: int) -> np.ndarray:
    """Matrix T with T @ vec(x) = same-padded cross-correlation of x (C x H x W) with kernel."""
    c, k, _ = kernel.shape
    p = k // 2
    hw = height * width
    t = np.zeros((hw, c * hw))
    for y in range(height):
        for x in range(width):
            row = y * width + x
            for i in range(k):
                yy = y + i - p
                if not 0 <= yy < height:
                    continue
                for j in range(k):
                    xx = x + j - p
                    if 0 <= xx < width:
                        t[row, np.arange(c) * hw + yy * width + xx] = kernel[:, i, j]
    return t


def operators(inst: LinearLayerInstance) -> np.ndarray:
    _, _, h, w = inst.images.shape
    return np.stack([toeplitz(kern, h, w) for kern in inst.kernels])


def branch_outputs(inst: LinearLayerInstance) -> np.ndarray:
    """n x m x (H*W) array of W_k x_i."""
    ops = operators(inst)
    x = inst.images.reshape(inst.m, -1)
    return np.einsum("kpq,iq->kip", ops, x)


def layer_output(inst: LinearLayerInstance, pruned=(), branches: np.ndarray | None = None) -> np.ndarray:
    y = branch_outputs(inst) if branches is None else branches
    y = y.copy()
    y[list(_as_set(pruned, inst.n))] = 0.0
    if inst.mode == "sum":
        return y.sum(axis=0)
    return np.concatenate(list(y), axis=1)


def _as_set(pruned, n: int) -> tuple[int, ...]:
    idx = (int(pruned),) if np.isscalar(pruned) else tuple(int(i) for i in pruned)
    for i in idx:
        if not 0 <= i < n:
            raise IndexError(f"filter index {i} out of range for {n} filters")
    return idx


def relative_mse(inst: LinearLayerInstance, pruned, branches: np.ndarray | None = None) -> float:
    """Sum over images of ||Y_e - Y_pruned||^2 with pruned filters replaced by zeros."""
    y = branch_outputs(inst) if branches is None else branches
    full = layer_output(inst, (), y)
    cut = layer_output(inst, pruned, y)
    return float(((full - cut) ** 2).sum())


def statistic(inst: LinearLayerInstance, k: int) -> float:
    """Sum over images of ||W_k x_i||^2, through the Toeplitz operator."""
    (k,) = _as_set(k, inst.n)
    _, _, h, w = inst.images.shape
    t = toeplitz(inst.kernels[k], h, w)
    y = inst.images.reshape(inst.m, -1) @ t.T
    return float((y**2).sum())


def statistic_direct(inst: LinearLayerInstance, k: int) -> float:
    """The same statistic through direct same-mode correlation, channel by channel."""
    (k,) = _as_set(k, inst.n)
    total = 0.0
    for img in inst.images:
        y = sum(correlate(img[c], inst.kernels[k, c], mode="same", method="direct") for c in range(img.shape[0]))
        total += float((y**2).sum())
    return total


def verify_equivalence(inst: LinearLayerInstance, prune_count: int = 1, rtol: float = 1e-9) -> dict:
    """Compare the statistic-chosen prune set with the brute-force MSE optimum.

    The statistic picks the ``prune_count`` lowest-energy filters (ties go
    to the lower index). ``agree`` is true when that set's MSE equals the
    minimum over all sets of that size, to relative tolerance ``rtol``.
    The worst-case fields do the same for the highest-energy set against
    the maximum MSE.
    """
    if not 1 <= prune_count <= inst.n:
        raise ValueError(f"prune_count must lie in [1, {inst.n}]")
    y = branch_outputs(inst)
    stats = (y**2).sum(axis=(1, 2))
    order = sorted(range(inst.n), key=lambda i: (stats[i], i))
    best = tuple(sorted(order[:prune_count]))
    worst = tuple(sorted(order[-prune_count:]))
    combos = list(itertools.combinations(range(inst.n), prune_count))
    mses = np.array([relative_mse(inst, s, y) for s in combos])
    lo, hi = mses.min(), mses.max()
    scale = max(abs(hi), 1e-300)

    def close(a, b):
        return abs(a - b) <= rtol * scale

    argmin_mse = combos[int(np.argmin(mses))]
    argmax_mse = combos[int(np.argmax(mses))]
    mse_best = relative_mse(inst, best, y)
    mse_worst = relative_mse(inst, worst, y)
    srt = np.sort(stats)
    stat_tie = bool(prune_count < inst.n and close(srt[prune_count - 1], srt[prune_count])) if inst.n > 1 else False
    mse_tie = int(sum(close(v, lo) for v in mses)) > 1
    return {
        "mode": inst.mode,
        "n": inst.n,
        "m": inst.m,
        "prune_count": prune_count,
        "statistics": [float(s) for s in stats],
        "argmin_stat": list(best),
        "argmin_mse": list(argmin_mse),
        "min_mse": float(lo),
        "mse_of_stat_choice": float(mse_best),
        "agree": bool(close(mse_best, lo)),
        "tie": bool(stat_tie or mse_tie),
        "argmax_stat": list(worst),
        "argmax_mse": list(argmax_mse),
        "max_mse": float(hi),
        "worst_agree": bool(close(mse_worst, hi)),
    }


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True)


def random_instance(
    rng: np.random.Generator,
    mode: str = "concat",
    max_filters: int = 6,
    max_images: int = 20,
    max_hw: int = 8,
    channels: int | None = None,
    kernel_sizes=(1, 3, 5),
) -> LinearLayerInstance:
    n = int(rng.integers(1, max_filters + 1))
    m = int(rng.integers(1, max_images + 1))
    h = int(rng.integers(1, max_hw + 1))
    w = int(rng.integers(1, max_hw + 1))
    c = channels or int(rng.integers(1, 4))
    k = int(rng.choice(kernel_sizes))
    return LinearLayerInstance(rng.normal(size=(n, c, k, k)), rng.normal(size=(m, c, h, w)), mode)


def find_sum_mode_counterexample(rng: np.random.Generator, tries: int = 2000, prune_count: int = 2,
                                 ) -> tuple[LinearLayerInstance, dict] | None:
    """Search for a sum-mode instance where the statistic misses the MSE optimum.

    Kernels are drawn as perturbations of a shared kernel, some negated, so
    branch outputs are strongly (anti-)correlated.
    """
    for _ in range(tries):
        n = int(rng.integers(prune_count + 1, 6))
        base = rng.normal(size=(1, 1, 3, 3))
        signs = rng.choice([-1.0, 1.0], size=(n, 1, 1, 1))
        kernels = signs * base * rng.uniform(0.5, 1.5, size=(n, 1, 1, 1)) + 0.3 * rng.normal(size=(n, 1, 3, 3))
        inst = LinearLayerInstance(kernels, rng.normal(size=(int(rng.integers(1, 6)), 1, 5, 5)), "sum")
        rep = verify_equivalence(inst, prune_count)
        if not rep["agree"] and not rep["tie"]:
            return inst, rep
    return None

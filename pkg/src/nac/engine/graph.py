"""Turn a NetworkSpec into an executable, trainable graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..arch import BlockKind, NetworkSpec, Stage, check_input_shape, validate
from ..errors import ConfigError
from . import ops
from .tensor import Tensor, parameter


@dataclass
class BlockInfo:
    block_id: str
    kind: BlockKind
    stage: int
    layer: int


class _Builder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def he(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        data = self.rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        return self._add(name, data)

    def const(self, name: str, shape: tuple[int, ...], value: float) -> Tensor:
        return self._add(name, np.full(shape, value))

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter id {name!r}")
        t = parameter(np.asarray(data, dtype=self.dtype), name=name)
        self.params[name] = t
        return t

    def bn(self, prefix: str, channels: int) -> "_BN":
        gamma = self.const(f"{prefix}.gamma", (channels,), 1.0)
        beta = self.const(f"{prefix}.beta", (channels,), 0.0)
        self.buffers[f"{prefix}.running_mean"] = np.zeros(channels, dtype=np.float64)
        self.buffers[f"{prefix}.running_var"] = np.ones(channels, dtype=np.float64)
        return _BN(prefix, gamma, beta, self.buffers)


@dataclass
class _BN:
    prefix: str
    gamma: Tensor
    beta: Tensor
    buffers: dict

    def __call__(self, x: Tensor, training: bool, momentum: float) -> Tensor:
        return ops.batchnorm(
            x, self.gamma, self.beta,
            self.buffers[f"{self.prefix}.running_mean"], self.buffers[f"{self.prefix}.running_var"],
            training, momentum,
        )


class _ConvReluBN:
    """conv (+bias) -> relu -> batchnorm, the unit every block and stem layer uses."""

    def __init__(self, b: _Builder, prefix: str, kind_kernel: int, separable: bool, cin: int, cout: int,
                 stride: int = 1):
        self.stride = stride
        self.separable = separable
        k = kind_kernel
        if separable:
            self.dw = b.he(f"{prefix}.dw", (cin, k, k), k * k)
            self.w = b.he(f"{prefix}.pw", (cout, cin, 1, 1), cin)
        else:
            self.w = b.he(f"{prefix}.w", (cout, cin, k, k), cin * k * k)
        self.b = b.const(f"{prefix}.b", (cout,), 0.0)
        self.bn = b.bn(f"{prefix}.bn", cout)

    def __call__(self, x: Tensor, training: bool, momentum: float) -> Tensor:
        if self.separable:
            y = ops.separable_conv2d(x, self.dw, self.w, self.b, self.stride)
        else:
            y = ops.conv2d(x, self.w, self.b, self.stride)
        return self.bn(ops.relu(y), training, momentum)


class StemNode:
    def __init__(self, b: _Builder, net: NetworkSpec, cin: int):
        self.units = []
        for i, sl in enumerate(net.stem.layers):
            self.units.append(_ConvReluBN(b, f"stem.{i}", sl.kernel, False, cin, sl.channels, sl.stride))
            cin = sl.channels

    def __call__(self, g: "Graph", x: Tensor, training: bool, rng) -> Tensor:
        for u in self.units:
            x = u(x, training, g.bn_momentum)
        return x


class StageNode:
    """Layers of parallel blocks, concatenated and merged by 1x1 convs, plus weighted skips."""

    def __init__(self, b: _Builder, stage: Stage, si: int, width: int, info: dict[str, BlockInfo]):
        self.si = si
        self.layers = []
        for li, layer in enumerate(stage.layers):
            skips = stage.incoming_skips(li)
            entry = {"skips": [], "skipmerge": None, "blocks": []}
            if skips:
                for sk in skips:
                    w = b.const(f"skip.s{si}.{sk.src_layer}-{sk.dst_layer}", (), 1.0)
                    entry["skips"].append((sk.src_layer, w))
                cin = (1 + len(skips)) * width
                entry["skipmerge"] = (
                    b.he(f"s{si}.l{li}.skipmerge.w", (width, cin, 1, 1), cin),
                    b.const(f"s{si}.l{li}.skipmerge.b", (width,), 0.0),
                )
            for blk in layer.blocks:
                unit = _ConvReluBN(b, f"blk.{blk.block_id}", blk.kind.kernel_size, blk.kind.separable,
                                   width, blk.out_channels)
                entry["blocks"].append((blk.block_id, unit))
                info[blk.block_id] = BlockInfo(blk.block_id, blk.kind, si, li)
            cat = sum(blk.out_channels for blk in layer.blocks)
            entry["merge"] = (
                b.he(f"s{si}.l{li}.merge.w", (width, cat, 1, 1), cat),
                b.const(f"s{si}.l{li}.merge.b", (width,), 0.0),
            )
            self.layers.append(entry)

    def __call__(self, g: "Graph", x: Tensor, training: bool, rng) -> Tensor:
        outs: list[Tensor] = []
        for entry in self.layers:
            if entry["skipmerge"] is not None:
                inputs = [x] + [ops.scale(outs[src], w) for src, w in entry["skips"]]
                x = ops.conv2d(ops.concat(inputs), *entry["skipmerge"])
            branch = []
            for block_id, unit in entry["blocks"]:
                y = unit(x, training, g.bn_momentum)
                g.taps[block_id] = y
                branch.append(y)
            x = ops.conv2d(ops.concat(branch), *entry["merge"])
            outs.append(x)
        return x


class WidenerNode:
    """Stride-2 maxpool in parallel with a stride-2 3x3 conv; output width doubles."""

    def __init__(self, b: _Builder, si: int, width: int):
        self.conv = _ConvReluBN(b, f"widener{si}", 3, False, width, width, stride=2)

    def __call__(self, g: "Graph", x: Tensor, training: bool, rng) -> Tensor:
        return ops.concat([ops.maxpool2d(x, 3, 2), self.conv(x, training, g.bn_momentum)])


class ClassifierNode:
    def __init__(self, b: _Builder, width: int, num_classes: int, keep_prob: float):
        self.keep_prob = keep_prob
        self.w = b.he("fc.w", (width, num_classes), width)
        self.b = b.const("fc.b", (num_classes,), 0.0)

    def __call__(self, g: "Graph", x: Tensor, training: bool, rng) -> Tensor:
        h = ops.dropout(ops.global_avgpool(x), self.keep_prob, rng, training)
        return ops.fully_connected(h, self.w, self.b)


@dataclass
class Graph:
    """Executable network: ordered op nodes plus a parameter registry.

    ``taps`` holds the output of every block from the most recent forward
    pass, keyed by block id; featuremap statistics read from it.
    """

    spec: NetworkSpec
    input_shape: tuple[int, int, int]
    nodes: list
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    blocks: dict[str, BlockInfo]
    bn_momentum: float = 0.9
    taps: dict[str, Tensor] = field(default_factory=dict)

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if training and rng is None and self.spec.classifier.dropout_keep_prob < 1:
            raise ConfigError("training forward with dropout needs an rng")
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        self.taps = {}
        for node in self.nodes:
            x = node(self, x, training, rng)
        return x

    __call__ = forward

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def skip_weights(self) -> dict[tuple[int, int, int], float]:
        out = {}
        for name, p in self.params.items():
            if name.startswith("skip.s"):
                stage, pair = name[len("skip.s"):].split(".")
                src, dst = pair.split("-")
                out[(int(stage), int(src), int(dst))] = float(p.data)
        return out

    def kernel_params(self) -> list[Tensor]:
        """Convolution and fully connected weights (the l2-regularised set)."""
        return [p for n, p in self.params.items() if n.endswith((".w", ".dw", ".pw"))]


def build_graph(
    net: NetworkSpec,
    input_shape: Sequence[int],
    num_classes: int | None = None,
    seed: int | np.random.Generator = 0,
    dtype=np.float32,
    bn_momentum: float = 0.9,
) -> Graph:
    """stem -> stage_1 -> widener -> ... -> stage_k -> classifier, freshly initialised."""
    problems = validate(net)
    if problems:
        raise ValueError("invalid network: " + "; ".join(problems))
    check_input_shape(net, input_shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    b = _Builder(rng, np.dtype(dtype))
    info: dict[str, BlockInfo] = {}
    nodes: list = [StemNode(b, net, input_shape[0])]
    for si, stage in enumerate(net.stages):
        width = net.stage_width(si)
        nodes.append(StageNode(b, stage, si, width, info))
        if si < len(net.stages) - 1:
            nodes.append(WidenerNode(b, si, width))
    classes = num_classes if num_classes is not None else net.classifier.num_classes
    nodes.append(ClassifierNode(b, net.stage_width(len(net.stages) - 1), classes,
                                net.classifier.dropout_keep_prob))
    return Graph(net, tuple(input_shape), nodes, b.params, b.buffers, info, bn_momentum)

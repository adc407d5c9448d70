"""Architecture IR for EnvelopeNets and the networks derived from them.

A network is a stem, a sequence of stages separated by wideners, and a
classification head. A stage is a list of layers; a layer is a list of
parallel blocks whose outputs are concatenated and merged back to the stage
width by a 1x1 convolution. Specs are immutable: every edit produces a new
spec.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import jsonschema

from .errors import ShapeError


class ArchitectureError(ValueError):
    """Raised for malformed notation strings or architecture documents."""


class NotRepresentableError(ArchitectureError):
    """The network cannot be written in C/n1-n2.../M notation."""


class UnsupportedEnvelopeError(ArchitectureError):
    pass


class BlockKind(enum.Enum):
    CONV1X1 = "conv1x1"
    CONV3X3 = "conv3x3"
    SEP3X3 = "sep3x3"
    CONV5X5 = "conv5x5"
    SEP5X5 = "sep5x5"
    SEP7X7 = "sep7x7"
    MAXPOOL3X3 = "maxpool3x3"
    AVGPOOL_GLOBAL = "avgpool_global"
    FULLY_CONNECTED = "fully_connected"
    ZERO = "zero"

    @property
    def is_conv(self) -> bool:
        return self in CONV_KINDS

    @property
    def kernel_size(self) -> int:
        return _KERNEL[self]

    @property
    def separable(self) -> bool:
        return self in (BlockKind.SEP3X3, BlockKind.SEP5X5, BlockKind.SEP7X7)


_KERNEL = {
    BlockKind.CONV1X1: 1,
    BlockKind.CONV3X3: 3,
    BlockKind.SEP3X3: 3,
    BlockKind.CONV5X5: 5,
    BlockKind.SEP5X5: 5,
    BlockKind.SEP7X7: 7,
    BlockKind.MAXPOOL3X3: 3,
    BlockKind.ZERO: 1,
}

# Canonical envelope order; notation M selects the first M kinds.
ENVELOPE_KINDS: tuple[BlockKind, ...] = (
    BlockKind.CONV1X1,
    BlockKind.CONV3X3,
    BlockKind.SEP3X3,
    BlockKind.CONV5X5,
    BlockKind.SEP5X5,
    BlockKind.SEP7X7,
)
CONV_KINDS = frozenset(ENVELOPE_KINDS)


@dataclass(frozen=True)
class Block:
    kind: BlockKind
    block_id: str
    out_channels: int


@dataclass(frozen=True)
class Layer:
    blocks: tuple[Block, ...]

    @property
    def width(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True)
class SkipConnection:
    src_layer: int
    dst_layer: int
    weight: float = 1.0


@dataclass(frozen=True)
class Stage:
    layers: tuple[Layer, ...]
    skip_connections: tuple[SkipConnection, ...] = ()

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def block_count(self) -> int:
        return sum(layer.width for layer in self.layers)

    def incoming_skips(self, dst: int) -> list[SkipConnection]:
        return [s for s in self.skip_connections if s.dst_layer == dst]


@dataclass(frozen=True)
class StemLayer:
    kernel: int
    channels: int
    stride: int = 1


@dataclass(frozen=True)
class StemSpec:
    layers: tuple[StemLayer, ...]

    @property
    def out_channels(self) -> int:
        return self.layers[-1].channels


@dataclass(frozen=True)
class ClassifierSpec:
    dropout_keep_prob: float = 0.8
    num_classes: int = 10


@dataclass(frozen=True)
class NetworkSpec:
    stem_channels: int
    stages: tuple[Stage, ...]
    envelope_cell: tuple[BlockKind, ...] = ENVELOPE_KINDS
    stem: StemSpec | None = None
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)

    def __post_init__(self):
        if self.stem is None:
            object.__setattr__(self, "stem", StemSpec((StemLayer(3, self.stem_channels, 1),)))

    def stage_width(self, stage_index: int) -> int:
        """Channel width of a stage: every widener doubles it."""
        return self.stem_channels * 2**stage_index

    def block_ids(self) -> list[str]:
        return [b.block_id for st in self.stages for layer in st.layers for b in layer.blocks]

    @property
    def block_count(self) -> int:
        return sum(st.block_count for st in self.stages)

    def with_stage(self, index: int, stage: Stage) -> NetworkSpec:
        stages = list(self.stages)
        stages[index] = stage
        return replace(self, stages=tuple(stages))


def block_channels(stage_width: int, envelope_size: int) -> int:
    """Per-branch output channels: the stage width split over the envelope, rounded up."""
    return -(-stage_width // envelope_size)


def dense_skips(depth: int, weight: float = 1.0) -> tuple[SkipConnection, ...]:
    """All (i, j) pairs with j > i + 1; adjacent layers are already wired directly."""
    return tuple(SkipConnection(i, j, weight) for j in range(depth) for i in range(j - 1))


def make_block_id(stage_index: int, tag: str, index: int) -> str:
    return f"s{stage_index}{tag}b{index}"


# --------------------------------------------------------------------------- notation

_NOTATION = re.compile(r"^(\d+)/(\d+(?:-\d+)*)/(\d+)$")


def parse_notation(
    s: str,
    num_classes: int = 10,
    dropout_keep_prob: float = 0.8,
    stem: StemSpec | None = None,
) -> NetworkSpec:
    """Parse ``C/n1-n2-.../M`` into a uniform EnvelopeNet.

    >>> net = parse_notation("128/10-1-1-1/6")
    >>> [st.depth for st in net.stages]
    [10, 1, 1, 1]
    """
    text = s.strip()
    m = _NOTATION.match(text)
    if m is None:
        raise ArchitectureError(f"malformed notation {s!r}: offending token {_offending_token(text)!r}")
    c, depths, M = int(m.group(1)), [int(t) for t in m.group(2).split("-")], int(m.group(3))
    for name, value in [("C", c), ("M", M)] + [(f"n{i + 1}", d) for i, d in enumerate(depths)]:
        if value < 1:
            raise ArchitectureError(f"malformed notation {s!r}: offending token {name}={value} (must be >= 1)")
    if M > len(ENVELOPE_KINDS):
        raise UnsupportedEnvelopeError(
            f"envelope of {M} blocks unsupported (at most {len(ENVELOPE_KINDS)})"
        )
    cell = ENVELOPE_KINDS[:M]
    stages = []
    for si, depth in enumerate(depths):
        ch = block_channels(c * 2**si, M)
        layers = tuple(
            Layer(tuple(Block(k, make_block_id(si, f"l{li}", bi), ch) for bi, k in enumerate(cell)))
            for li in range(depth)
        )
        stages.append(Stage(layers, dense_skips(depth)))
    return NetworkSpec(
        stem_channels=c,
        stages=tuple(stages),
        envelope_cell=cell,
        stem=stem or StemSpec((StemLayer(3, c, 1),)),
        classifier=ClassifierSpec(dropout_keep_prob, num_classes),
    )


def _offending_token(text: str) -> str:
    parts = text.split("/")
    if len(parts) != 3:
        return text
    depths = parts[1].split("-")
    named = [("C", parts[0])] + [(f"n{i + 1}", d) for i, d in enumerate(depths)] + [("M", parts[2])]
    for name, part in named:
        if not part:
            return f"{name}=<missing>"
        if not part.isdigit():
            return part
    return text


def format_notation(net: NetworkSpec) -> str:
    """Inverse of :func:`parse_notation` for uniform networks."""
    M = len(net.envelope_cell)
    if tuple(ENVELOPE_KINDS[:M]) != tuple(net.envelope_cell):
        raise NotRepresentableError("envelope cell is not a canonical prefix")
    want = sorted(k.value for k in net.envelope_cell)
    for si, st in enumerate(net.stages):
        for li, layer in enumerate(st.layers):
            if sorted(b.kind.value for b in layer.blocks) != want:
                raise NotRepresentableError(
                    f"stage {si} layer {li} has {layer.width} blocks; not a full envelope cell"
                )
    return f"{net.stem_channels}/{'-'.join(str(st.depth) for st in net.stages)}/{M}"


# --------------------------------------------------------------------------- documents

_KIND_ENUM = [k.value for k in ENVELOPE_KINDS]

ARCH_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["stem_channels", "envelope_cell", "stages", "stem", "classifier"],
    "properties": {
        "stem_channels": {"type": "integer", "minimum": 1},
        "envelope_cell": {"type": "array", "minItems": 1, "items": {"enum": _KIND_ENUM}},
        "stages": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["layers", "skips"],
                "properties": {
                    "layers": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["blocks"],
                            "properties": {
                                "blocks": {
                                    "type": "array",
                                    "items": {
                                        "type": "object",
                                        "additionalProperties": False,
                                        "required": ["id", "kind", "out_channels"],
                                        "properties": {
                                            "id": {"type": "string", "minLength": 1},
                                            "kind": {"enum": _KIND_ENUM},
                                            "out_channels": {"type": "integer", "minimum": 1},
                                        },
                                    },
                                }
                            },
                        },
                    },
                    "skips": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["src", "dst", "weight"],
                            "properties": {
                                "src": {"type": "integer", "minimum": 0},
                                "dst": {"type": "integer", "minimum": 0},
                                "weight": {"type": "number"},
                            },
                        },
                    },
                },
            },
        },
        "stem": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kernel", "channels", "stride"],
                "properties": {
                    "kernel": {"type": "integer", "minimum": 1},
                    "channels": {"type": "integer", "minimum": 1},
                    "stride": {"type": "integer", "minimum": 1},
                },
            },
        },
        "classifier": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dropout_keep", "classes"],
            "properties": {
                "dropout_keep": {"type": "number"},
                "classes": {"type": "integer", "minimum": 1},
            },
        },
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(ARCH_SCHEMA)


def to_document(net: NetworkSpec) -> dict[str, Any]:
    return {
        "stem_channels": net.stem_channels,
        "envelope_cell": [k.value for k in net.envelope_cell],
        "stages": [
            {
                "layers": [
                    {"blocks": [{"id": b.block_id, "kind": b.kind.value, "out_channels": b.out_channels}
                                for b in layer.blocks]}
                    for layer in st.layers
                ],
                "skips": [{"src": s.src_layer, "dst": s.dst_layer, "weight": s.weight}
                          for s in st.skip_connections],
            }
            for st in net.stages
        ],
        "stem": [{"kernel": s.kernel, "channels": s.channels, "stride": s.stride} for s in net.stem.layers],
        "classifier": {"dropout_keep": net.classifier.dropout_keep_prob, "classes": net.classifier.num_classes},
    }


def from_document(doc: Any) -> NetworkSpec:
    """Build a spec from a parsed document, raising with a JSON-pointer path on schema errors."""
    errors = sorted(_VALIDATOR.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = [str(p) for p in err.absolute_path]
        if err.validator == "required":
            missing = re.findall(r"'([^']+)' is a required property", err.message)
            path += missing[:1]
        elif err.validator == "additionalProperties":
            extra = re.findall(r"'([^']+)' was unexpected", err.message)
            path += extra[:1]
        raise ArchitectureError(f"/{'/'.join(path)}: {err.message}")
    net = NetworkSpec(
        stem_channels=doc["stem_channels"],
        envelope_cell=tuple(BlockKind(k) for k in doc["envelope_cell"]),
        stages=tuple(
            Stage(
                tuple(
                    Layer(tuple(Block(BlockKind(b["kind"]), b["id"], b["out_channels"]) for b in layer["blocks"]))
                    for layer in st["layers"]
                ),
                tuple(SkipConnection(s["src"], s["dst"], float(s["weight"])) for s in st["skips"]),
            )
            for st in doc["stages"]
        ),
        stem=StemSpec(tuple(StemLayer(s["kernel"], s["channels"], s["stride"]) for s in doc["stem"])),
        classifier=ClassifierSpec(float(doc["classifier"]["dropout_keep"]), doc["classifier"]["classes"]),
    )
    return net


def serialize(net: NetworkSpec) -> str:
    problems = validate(net)
    if problems:
        raise ArchitectureError("cannot serialize invalid network: " + "; ".join(problems))
    return json.dumps(to_document(net), indent=2, sort_keys=True) + "\n"


def deserialize(text: str) -> NetworkSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchitectureError(f"/: not valid JSON ({exc})") from exc
    net = from_document(doc)
    problems = validate(net)
    if problems:
        raise ArchitectureError("; ".join(problems))
    return net


def load_architecture(source: str, **notation_kwargs) -> NetworkSpec:
    """Accept either a notation string or a path to an architecture document."""
    if _NOTATION.match(source.strip()):
        return parse_notation(source, **notation_kwargs)
    with open(source) as fh:
        return deserialize(fh.read())


# --------------------------------------------------------------------------- validation


def validate(net: NetworkSpec) -> list[str]:
    """Return every structural violation; an empty list means the network is well formed."""
    out: list[str] = []
    if net.stem_channels < 1:
        out.append("stem_channels must be positive")
    if not net.envelope_cell:
        out.append("envelope_cell must not be empty")
    for k in net.envelope_cell:
        if not k.is_conv:
            out.append(f"envelope_cell contains non-convolutional kind {k.value}")
    if not net.stem.layers:
        out.append("stem must have at least one layer")
    elif net.stem.out_channels != net.stem_channels:
        out.append(f"stem output {net.stem.out_channels} != stem_channels {net.stem_channels}")
    for sl in net.stem.layers:
        if sl.kernel < 1 or sl.kernel % 2 == 0 or sl.channels < 1 or sl.stride < 1:
            out.append(f"invalid stem layer {sl}")
    if not 0 < net.classifier.dropout_keep_prob <= 1:
        out.append("classifier dropout_keep_prob must lie in (0, 1]")
    if net.classifier.num_classes < 1:
        out.append("classifier num_classes must be positive")
    if not net.stages:
        out.append("network must have at least one stage")
    seen: set[str] = set()
    for si, st in enumerate(net.stages):
        if not st.layers:
            out.append(f"stage {si}: stage must contain >=1 layer")
        for li, layer in enumerate(st.layers):
            if not layer.blocks:
                out.append(f"stage {si} layer {li}: layer must contain ≥1 block")
            for b in layer.blocks:
                if b.block_id in seen:
                    out.append(f"duplicate block_id {b.block_id!r}")
                seen.add(b.block_id)
                if not b.kind.is_conv:
                    out.append(f"block {b.block_id!r}: kind {b.kind.value} cannot appear in a trainable network")
                if b.out_channels < 1:
                    out.append(f"block {b.block_id!r}: out_channels must be positive")
        pairs: set[tuple[int, int]] = set()
        for sk in st.skip_connections:
            if sk.src_layer >= sk.dst_layer:
                out.append(f"stage {si}: skip {sk.src_layer}->{sk.dst_layer} must go forward (src < dst)")
            if not (0 <= sk.src_layer < st.depth and 0 <= sk.dst_layer < st.depth):
                out.append(f"stage {si}: skip {sk.src_layer}->{sk.dst_layer} out of range")
            if (sk.src_layer, sk.dst_layer) in pairs:
                out.append(f"stage {si}: duplicate skip {sk.src_layer}->{sk.dst_layer}")
            pairs.add((sk.src_layer, sk.dst_layer))
            if not math.isfinite(sk.weight):
                out.append(f"stage {si}: skip {sk.src_layer}->{sk.dst_layer} weight not finite")
    return out


# --------------------------------------------------------------------------- parameter counting


def conv_params(kernel: int, cin: int, cout: int, bias: bool = True) -> int:
    return kernel * kernel * cin * cout + (cout if bias else 0)


def block_parameters(kind: BlockKind, in_channels: int, out_channels: int) -> int:
    """Trainable parameters of one block: conv (+bias) then batchnorm scale/shift."""
    if kind is BlockKind.ZERO:
        return 0
    if not kind.is_conv:
        raise ArchitectureError(f"{kind.value} is not a parametrised block")
    k = kind.kernel_size
    if kind.separable:
        conv = k * k * in_channels + conv_params(1, in_channels, out_channels)
    else:
        conv = conv_params(k, in_channels, out_channels)
    return conv + 2 * out_channels


def stem_output_hw(net: NetworkSpec, hw: tuple[int, int]) -> tuple[int, int]:
    h, w = hw
    for sl in net.stem.layers:
        h, w = -(-h // sl.stride), -(-w // sl.stride)
    return h, w


def check_input_shape(net: NetworkSpec, input_shape: Sequence[int]) -> None:
    if len(input_shape) != 3:
        raise ShapeError(f"input_shape must be (C, H, W), got {tuple(input_shape)}")
    h, w = stem_output_hw(net, (input_shape[1], input_shape[2]))
    div = 2 ** (len(net.stages) - 1)
    if h % div or w % div:
        raise ShapeError(f"spatial size {h}x{w} after the stem is not divisible by {div}")


def count_parameters(net: NetworkSpec, input_shape: Sequence[int]) -> int:
    """Exact trainable-parameter count of the network built on (C, H, W) inputs."""
    check_input_shape(net, input_shape)
    total = 0
    cin = input_shape[0]
    for sl in net.stem.layers:
        total += conv_params(sl.kernel, cin, sl.channels) + 2 * sl.channels
        cin = sl.channels
    for si, st in enumerate(net.stages):
        width = net.stage_width(si)
        for li, layer in enumerate(st.layers):
            nskip = len(st.incoming_skips(li))
            if nskip:
                total += conv_params(1, (1 + nskip) * width, width) + nskip
            total += sum(block_parameters(b.kind, width, b.out_channels) for b in layer.blocks)
            total += conv_params(1, sum(b.out_channels for b in layer.blocks), width)
        if si < len(net.stages) - 1:
            total += conv_params(3, width, width) + 2 * width
    last = net.stage_width(len(net.stages) - 1)
    total += last * net.classifier.num_classes + net.classifier.num_classes
    return total

import copy
import json

import numpy as np
import pytest
from helpers import random_spec
from hypothesis import given, settings
from hypothesis import strategies as st

from nac.arch import (
    ArchitectureError,
    Block,
    BlockKind,
    Layer,
    NotRepresentableError,
    SkipConnection,
    Stage,
    UnsupportedEnvelopeError,
    block_parameters,
    count_parameters,
    deserialize,
    format_notation,
    from_document,
    load_architecture,
    parse_notation,
    serialize,
    to_document,
    validate,
)
from nac.errors import ShapeError


def test_parse_reference_envelope():
    net = parse_notation("128/10-1-1-1/6")
    assert [s.depth for s in net.stages] == [10, 1, 1, 1]
    assert all(layer.width == 6 for s in net.stages for layer in s.layers)
    assert net.stem_channels == 128


def test_parse_constructed_notation():
    assert [s.depth for s in parse_notation("128/7-6-2/6").stages] == [7, 6, 2]


def test_minimal_network():
    net = parse_notation("1/1/1")
    assert len(net.stages) == 1 and net.stages[0].depth == 1
    (blk,) = net.stages[0].layers[0].blocks
    assert blk.kind is BlockKind.CONV1X1


@pytest.mark.parametrize("s", ["192/2-2-2/6", "64/7-6-2/6", "128/10-1-1-1/6", "3/1/2"])
def test_round_trip(s):
    assert format_notation(parse_notation(s)) == s


@pytest.mark.parametrize("bad,token", [("128/2-x-2/6", "x"), ("abc/2/6", "abc"), ("128/2-2/", "M=<missing>"),
                                        ("0/2/6", "C=0"), ("4/2-0/3", "n2=0")])
def test_malformed_notation_names_token(bad, token):
    with pytest.raises(ArchitectureError, match=f"offending token '?{token}"):
        parse_notation(bad)


def test_envelope_larger_than_six_unsupported():
    with pytest.raises(UnsupportedEnvelopeError):
        parse_notation("8/2/7")


def test_pruned_network_not_representable():
    net = parse_notation("8/2/6")
    st0 = net.stages[0]
    pruned = Stage((Layer(st0.layers[0].blocks[:5]), st0.layers[1]), st0.skip_connections)
    with pytest.raises(NotRepresentableError):
        format_notation(net.with_stage(0, pruned))


def test_serialize_round_trip_and_exact_weight():
    net = parse_notation("8/3/2")
    st0 = net.stages[0]
    net = net.with_stage(0, Stage(st0.layers, (SkipConnection(0, 2, 0.25),)))
    back = deserialize(serialize(net))
    assert back == net
    assert back.stages[0].skip_connections[0].weight == 0.25


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_document_round_trip_random(seed):
    net = random_spec(np.random.default_rng(seed))
    assert validate(net) == []
    assert deserialize(serialize(net)) == net


def test_missing_stages_reports_path():
    doc = to_document(parse_notation("4/1/1"))
    del doc["stages"]
    with pytest.raises(ArchitectureError, match=r"^/stages"):
        from_document(doc)


def test_unknown_key_rejected():
    doc = to_document(parse_notation("4/1/1"))
    doc["stages"][0]["extra"] = 1
    with pytest.raises(ArchitectureError, match=r"^/stages/0/extra"):
        from_document(doc)


def test_bad_kind_reports_nested_path():
    doc = to_document(parse_notation("4/1/1"))
    doc["stages"][0]["layers"][0]["blocks"][0]["kind"] = "conv9x9"
    with pytest.raises(ArchitectureError, match=r"^/stages/0/layers/0/blocks/0/kind"):
        from_document(doc)


def test_load_architecture_accepts_path(tmp_path):
    net = parse_notation("4/2-1/3")
    p = tmp_path / "a.json"
    p.write_text(serialize(net))
    assert load_architecture(str(p)) == net == load_architecture("4/2-1/3")


def test_validate_empty_layer():
    net = parse_notation("4/2/2")
    bad = net.with_stage(0, Stage((Layer(()), net.stages[0].layers[1])))
    assert any("layer must contain ≥1 block" in v for v in validate(bad))


def test_validate_self_skip():
    net = parse_notation("4/2/2")
    bad = net.with_stage(0, Stage(net.stages[0].layers, (SkipConnection(1, 1),)))
    assert validate(bad)


def test_validate_duplicate_ids_and_zero_kind():
    net = parse_notation("4/2/2")
    l0 = net.stages[0].layers[0]
    dup = Layer((l0.blocks[0], Block(BlockKind.ZERO, l0.blocks[0].block_id, 2)))
    problems = validate(net.with_stage(0, Stage((dup, net.stages[0].layers[1]))))
    assert any("duplicate" in p for p in problems) and any("zero" in p for p in problems)


def test_fresh_reference_envelope_validates():
    assert validate(parse_notation("128/2-2-2/6")) == []


def test_block_parameter_hand_count():
    assert block_parameters(BlockKind.CONV3X3, 4, 8) == 312
    assert block_parameters(BlockKind.ZERO, 4, 8) == 0
    # depthwise 3*3*4 (no bias) + pointwise 4*8 + 8 + bn 16
    assert block_parameters(BlockKind.SEP3X3, 4, 8) == 36 + 40 + 16


def test_count_indivisible_shape():
    with pytest.raises(ShapeError):
        count_parameters(parse_notation("4/1-1/1"), (3, 5, 5))


def test_doubling_channels_more_than_doubles_count():
    small, big = parse_notation("8/3-3/6"), parse_notation("16/3-3/6")
    assert count_parameters(big, (3, 8, 8)) > 2 * count_parameters(small, (3, 8, 8))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_adding_a_block_strictly_increases_count(seed):
    rng = np.random.default_rng(seed)
    net = random_spec(rng)
    shape = (3, 8, 8)
    si = int(rng.integers(len(net.stages)))
    stage = net.stages[si]
    li = int(rng.integers(stage.depth))
    layer = stage.layers[li]
    extra = Block(net.envelope_cell[int(rng.integers(len(net.envelope_cell)))], "extra", layer.blocks[0].out_channels)
    layers = list(stage.layers)
    layers[li] = Layer(layer.blocks + (extra,))
    grown = net.with_stage(si, Stage(tuple(layers), stage.skip_connections))
    assert count_parameters(grown, shape) > count_parameters(net, shape)


def test_specs_are_immutable():
    net = parse_notation("4/1/1")
    with pytest.raises(AttributeError):
        net.stem_channels = 5
    doc = to_document(net)
    assert json.loads(json.dumps(doc)) == copy.deepcopy(doc)

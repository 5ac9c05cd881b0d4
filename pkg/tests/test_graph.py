import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain, conv, random_graph
from rfscope.families import FamilyConfig, cp_densenet, cp_resnet
from rfscope.graph import (
    ArchGraph,
    ArchParseError,
    CycleError,
    Dim2,
    GraphValidationError,
    NodeSpec,
    infer_shapes,
    parse_arch,
    serialize_arch,
    topo_order,
    validate,
)
from rfscope.rf import max_rf

MINIMAL = """{
  "version": 1,
  "input_shape": [1, 8, 8],
  "nodes": [
    {"id": "in", "kind": "input"},
    {"id": "c", "kind": "conv", "predecessors": ["in"], "kernel": [3, 3], "stride": [1, 1],
     "in_channels": 1, "out_channels": 4},
    {"id": "out", "kind": "output_probe", "predecessors": ["c"]}
  ]
}"""


def test_parse_minimal_graph():
    g = parse_arch(MINIMAL)
    assert len(g.nodes) == 3
    assert g["c"].padding == "same" and g["c"].dilation == Dim2(1, 1) and g["c"].groups == 1
    assert infer_shapes(g)["out"] == (4, 8, 8)


def test_round_trip_of_minimal_graph_is_canonical():
    text = serialize_arch(parse_arch(MINIMAL))
    assert serialize_arch(parse_arch(text)) == text
    assert text.endswith("\n") and "\r" not in text
    assert json.loads(text)["version"] == 1


def test_generated_resnet_file_parses_to_table_value():
    text = serialize_arch(cp_resnet(FamilyConfig(rho=5)))
    assert max_rf(parse_arch(text)).max_rf == Dim2(87, 87)


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda d: d["nodes"][1].update(kind="lstm"), "unknown node kind"),
        (lambda d: d["nodes"].append({"id": "c", "kind": "relu", "predecessors": ["in"]}), "duplicate node id"),
        (lambda d: d["nodes"][2].update(predecessors=["nope"]), "dangling predecessor"),
    ],
)
def test_parse_errors(mutate, match):
    data = json.loads(MINIMAL)
    mutate(data)
    with pytest.raises(ArchParseError, match=match):
        parse_arch(json.dumps(data))


def test_syntax_error_reports_position():
    with pytest.raises(ArchParseError) as info:
        parse_arch('{\n  "version": 1,\n  "nodes": [}\n')
    assert info.value.line == 3
    assert "line 3" in str(info.value)


def test_parse_rejects_invalid_graph():
    data = json.loads(MINIMAL)
    data["nodes"][1]["in_channels"] = 2
    with pytest.raises(GraphValidationError):
        parse_arch(json.dumps(data))


def _two_branch(c1, c2):
    nodes = [
        NodeSpec("in", "input"),
        NodeSpec("a", "conv", ("in",), kernel=3, in_channels=1, out_channels=c1),
        NodeSpec("b", "conv", ("in",), kernel=3, in_channels=1, out_channels=c2),
        NodeSpec("sum", "add", ("a", "b")),
        NodeSpec("out", "output_probe", ("sum",)),
    ]
    return ArchGraph.from_nodes(nodes, (1, 8, 8))


def test_validate_add_channel_mismatch_names_node():
    violations = validate(_two_branch(128, 256))
    assert len(violations) == 1
    assert "'sum'" in violations[0]
    assert validate(_two_branch(128, 128)) == []


def test_validate_group_divisibility():
    g = ArchGraph.from_nodes(
        [NodeSpec("in", "input"),
         NodeSpec("c", "conv", ("in",), kernel=3, groups=3, in_channels=128, out_channels=129),
         NodeSpec("out", "output_probe", ("c",))],
        (128, 8, 8),
    )
    violations = validate(g)
    assert len(violations) == 1 and "groups=3" in violations[0]


def test_validate_structural_rules():
    nodes = [
        NodeSpec("in", "input"),
        NodeSpec("x", "coord_concat", ("in",), in_channels=1, out_channels=3),
        NodeSpec("cat", "concat", ("x",)),
        NodeSpec("out", "output_probe", ("cat",)),
        NodeSpec("out2", "output_probe", ("in",)),
    ]
    text = "\n".join(validate(ArchGraph.from_nodes(nodes, (1, 4, 4))))
    assert "exactly one output_probe" in text
    assert "coord_concat 'x'" in text
    assert "concat 'cat' needs at least 2" in text


def test_validate_unreachable_and_dead_nodes():
    nodes = [
        NodeSpec("in", "input"),
        NodeSpec("r", "relu", ("in",)),
        NodeSpec("dead", "relu", ("in",)),
        NodeSpec("out", "output_probe", ("r",)),
    ]
    assert any("'dead' does not feed" in v for v in validate(ArchGraph.from_nodes(nodes, (1, 4, 4))))


def test_generated_densenet_validates():
    assert validate(cp_densenet(FamilyConfig("cp_densenet", rho=0))) == []


def test_topo_order_chain_and_diamond():
    g = ArchGraph.from_nodes(
        [NodeSpec("a", "input"), NodeSpec("b", "relu", ("a",)), NodeSpec("c", "output_probe", ("b",))],
        (1, 2, 2),
    )
    assert topo_order(g) == ["a", "b", "c"]
    d = ArchGraph.from_nodes(
        [NodeSpec("a", "input"), NodeSpec("c", "relu", ("a",)), NodeSpec("b", "relu", ("a",)),
         NodeSpec("d", "add", ("c", "b")), NodeSpec("e", "output_probe", ("d",))],
        (1, 2, 2),
    )
    assert topo_order(d) == ["a", "b", "c", "d", "e"]


def test_topo_order_detects_cycle():
    g = ArchGraph.from_nodes(
        [NodeSpec("a", "input"), NodeSpec("b", "add", ("a", "c")), NodeSpec("c", "relu", ("b",)),
         NodeSpec("p", "output_probe", ("c",))],
        (1, 2, 2),
    )
    with pytest.raises(CycleError) as info:
        topo_order(g)
    assert info.value.node_id in {"b", "c"}
    assert validate(g)


def test_resnet_topo_order_puts_branches_before_add():
    g = cp_resnet(FamilyConfig(rho=0))
    order = topo_order(g)
    pos = {nid: i for i, nid in enumerate(order)}
    for node in g.nodes.values():
        for p in node.predecessors:
            assert pos[p] < pos[node.id]


def test_equal_graphs_serialize_identically():
    a = chain((1, 8, 8), conv("c1", 1, 2), NodeSpec("r", "relu"))
    nodes = dict(reversed(list(a.nodes.items())))
    b = ArchGraph(nodes, a.input_shape)
    assert a == b
    assert serialize_arch(a) == serialize_arch(b)


def test_generator_serialization_is_byte_stable():
    one = serialize_arch(cp_resnet(FamilyConfig(rho=7))).encode()
    two = serialize_arch(cp_resnet(FamilyConfig(rho=7))).encode()
    assert one == two


def test_damping_survives_round_trip():
    g = chain((1, 8, 8), conv("c1", 1, 2, damping=(0.9, 0.5)))
    back = parse_arch(serialize_arch(g))
    assert back == g
    assert back["c1"].damping == (0.9, 0.5) and back["c1"].damping_mode == "literal"


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_round_trip_property(seed, linear):
    g = random_graph(np.random.default_rng(seed), n_layers=6, linear=linear)
    text = serialize_arch(g)
    back = parse_arch(text)
    assert back == g
    assert serialize_arch(back) == text

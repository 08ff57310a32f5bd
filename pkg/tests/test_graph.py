import pytest

from hybridnas import graph as gi
from hybridnas import space as sp
from hybridnas.errors import GraphStructureError, ShapeUnderflowError


def _arch(blocks):
    return sp.ArchitectureDescriptor(tuple(blocks))


def _single_cnn_arch(kind, stride=1, out_channels=16, groups=1, kernel=3):
    return _arch(
        [
            sp.CNNBlockSpec(kind, kernel, stride, out_channels, groups),
            sp.PoolingBlockSpec("max", 2, 2),
            sp.HybridViTBlockSpec("vit", None, 2, 16, False, None, "linear"),
            sp.ClassifierSpec(10),
        ]
    )


def test_minimal_arch_has_one_mhsa_no_ff(default_config):
    arch = _single_cnn_arch("residual")
    graph = gi.lower(arch, default_config)
    ops = [n.op for n in graph.nodes.values()]
    assert ops.count("mhsa") == 1
    assert ops.count("feedforward") == 0
    assert ops.count("globalavgpool") == 1
    assert ops.count("linear") == 1


def test_use_ff_adds_feedforward_and_residual(default_config):
    arch = _arch(
        [
            sp.CNNBlockSpec("residual", 3, 1, 16, 1),
            sp.PoolingBlockSpec("avg", 2, 2),
            sp.HybridViTBlockSpec("vit", None, 2, 16, True, 64, "softmax"),
            sp.ClassifierSpec(10),
        ]
    )
    graph = gi.lower(arch, default_config)
    ops = [n.op for n in graph.nodes.values()]
    assert ops.count("feedforward") == 1
    assert ops.count("add") == 3  # CNN block skip, MHSA residual, FF residual


def test_inverted_bottleneck_contains_depthwise_conv(default_config):
    arch = _single_cnn_arch("inverted_bottleneck", out_channels=24)
    graph = gi.lower(arch, default_config)
    depthwise = [
        n
        for n in graph.nodes.values()
        if n.op == "conv2d" and n.params["groups"] == n.params["in_channels"] > 1
    ]
    assert len(depthwise) == 1
    assert depthwise[0].params["in_channels"] == 3 * gi.INVERTED_EXPANSION


def test_every_cnn_kind_has_1x1_conv_on_skip(default_config):
    for kind in sp.CNN_KINDS:
        arch = _single_cnn_arch(kind, stride=2, out_channels=32)
        graph = gi.lower(arch, default_config)
        add_nodes = [n for n in graph.nodes.values() if n.op == "add" and n.block_index == 0]
        assert len(add_nodes) == 1
        skip_bn = graph.nodes[add_nodes[0].inputs[1]]
        assert skip_bn.op == "batchnorm"
        skip_conv = graph.nodes[skip_bn.inputs[0]]
        assert skip_conv.op == "conv2d"
        assert skip_conv.params["kernel"] == 1
        assert skip_conv.params["stride"] == 2
        # the skip connects straight back to the block input
        assert graph.nodes[skip_conv.inputs[0]].op == "input"


def test_bottleneck_reduces_then_expands(default_config):
    arch = _single_cnn_arch("bottleneck", out_channels=32)
    graph = gi.lower(arch, default_config)
    convs = [n for n in graph.nodes.values() if n.op == "conv2d" and n.block_index == 0]
    widths = [c.params["out_channels"] for c in convs]
    assert 32 // gi.BOTTLENECK_REDUCTION in widths
    assert widths.count(32) >= 2  # expand conv + skip projection


def test_vit_residual_structure(default_config):
    arch = _single_cnn_arch("residual")
    graph = gi.lower(arch, default_config)
    mhsa = next(n for n in graph.nodes.values() if n.op == "mhsa")
    bn = next(n for n in graph.nodes.values() if n.inputs == (mhsa.id,))
    assert bn.op == "batchnorm"
    add = next(n for n in graph.nodes.values() if bn.id in n.inputs and n.op == "add")
    assert mhsa.inputs[0] in add.inputs  # identity path from the MHSA input


def test_cnn_vit_prefix_changes_attention_width(default_config):
    arch = _arch(
        [
            sp.CNNBlockSpec("residual", 3, 1, 16, 1),
            sp.PoolingBlockSpec("max", 2, 2),
            sp.HybridViTBlockSpec(
                "cnn_vit", sp.CNNBlockSpec("residual", 3, 1, 48, 1), 2, 32, False, None, "linear"
            ),
            sp.ClassifierSpec(10),
        ]
    )
    graph = gi.lower(arch, default_config)
    mhsa = next(n for n in graph.nodes.values() if n.op == "mhsa")
    assert mhsa.params["d_model"] == 48


# ---------------------------------------------------------------------------
# shape inference
# ---------------------------------------------------------------------------


def test_conv_stride2_halves_resolution(default_config):
    arch = _single_cnn_arch("residual", stride=2)
    graph = gi.infer_shapes(gi.lower(arch, default_config), (3, 32, 32))
    first_conv = next(n for n in graph.nodes.values() if n.op == "conv2d")
    assert first_conv.params["kernel"] == 3
    assert first_conv.params["padding"] == 1
    assert first_conv.shape == (16, 16, 16)


def test_maxpool_halves_resolution(default_config):
    arch = _single_cnn_arch("residual", stride=1)
    graph = gi.infer_shapes(gi.lower(arch, default_config), (3, 32, 32))
    pool = next(n for n in graph.nodes.values() if n.op == "maxpool")
    assert pool.shape == (16, 16, 16)


def test_mhsa_and_ff_preserve_shape(default_config):
    arch = _arch(
        [
            sp.CNNBlockSpec("residual", 3, 2, 16, 1),
            sp.PoolingBlockSpec("combined", 2, 2),
            sp.HybridViTBlockSpec("vit", None, 2, 32, True, 64, "softmax"),
            sp.ClassifierSpec(10),
        ]
    )
    graph = gi.infer_shapes(gi.lower(arch, default_config), (3, 32, 32))
    for node in graph.nodes.values():
        if node.op in ("mhsa", "feedforward"):
            assert node.shape == graph.nodes[node.inputs[0]].shape == (16, 8, 8)


def test_shape_underflow_raises_with_node_name(default_config):
    arch = _arch(
        [
            sp.CNNBlockSpec("residual", 3, 2, 8, 1),
            sp.CNNBlockSpec("residual", 3, 2, 8, 1),
            sp.CNNBlockSpec("residual", 3, 2, 8, 1),
            sp.PoolingBlockSpec("max", 2, 2),
            sp.HybridViTBlockSpec("vit", None, 1, 16, False, None, "linear"),
            sp.ClassifierSpec(10),
        ]
    )
    config = sp.SearchSpaceConfig(input_shape=(3, 8, 8), cnn_depth=(3,), vit_depth=(1,))
    graph = gi.lower(arch, config)
    with pytest.raises(ShapeUnderflowError) as err:
        gi.infer_shapes(graph, (3, 8, 8))
    assert graph.nodes[err.value.node_id].op in ("maxpool", "conv2d")


def test_add_shape_mismatch_is_structural_error():
    nodes = {
        0: gi.LayerNode(0, "input", {}, (), -1),
        1: gi.LayerNode(
            1,
            "conv2d",
            {"kernel": 3, "stride": 2, "padding": 1, "groups": 1, "in_channels": 3, "out_channels": 3},
            (0,),
            0,
        ),
        2: gi.LayerNode(2, "add", {}, (0, 1), 0),
    }
    graph = gi.NetworkGraph(nodes=nodes, input_id=0, output_id=2)
    with pytest.raises(GraphStructureError):
        gi.infer_shapes(graph, (3, 8, 8))


# ---------------------------------------------------------------------------
# scheduling
# ---------------------------------------------------------------------------


def test_schedule_linear_chain_identity():
    nodes = {
        i: gi.LayerNode(i, "relu" if i else "input", {}, (i - 1,) if i else (), -1)
        for i in range(5)
    }
    graph = gi.NetworkGraph(nodes=nodes, input_id=0, output_id=4)
    assert gi.topological_schedule(graph) == (0, 1, 2, 3, 4)


def test_schedule_diamond_orders_skip_before_add(default_config):
    arch = _single_cnn_arch("residual")
    graph = gi.lower(arch, default_config)
    schedule = gi.topological_schedule(graph)
    position = {nid: i for i, nid in enumerate(schedule)}
    for node in graph.nodes.values():
        for src in node.inputs:
            assert position[src] < position[node.id]


def test_schedule_deterministic(default_config):
    arch = _single_cnn_arch("bottleneck")
    g1 = gi.lower(arch, default_config)
    g2 = gi.lower(arch, default_config)
    assert gi.topological_schedule(g1) == gi.topological_schedule(g2)


def test_schedule_detects_cycle():
    nodes = {
        0: gi.LayerNode(0, "relu", {}, (1,), -1),
        1: gi.LayerNode(1, "relu", {}, (0,), -1),
    }
    graph = gi.NetworkGraph(nodes=nodes, input_id=0, output_id=1)
    with pytest.raises(GraphStructureError):
        gi.topological_schedule(graph)


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


def test_graph_json_roundtrip(default_config, tmp_path):
    arch = _arch(
        [
            sp.CNNBlockSpec("inverted_bottleneck", 5, 2, 24, 1),
            sp.PoolingBlockSpec("combined", 2, 2),
            sp.HybridViTBlockSpec(
                "pool_vit", sp.PoolingBlockSpec("avg", 2, 2), 4, 32, True, 128, "softmax"
            ),
            sp.ClassifierSpec(10),
        ]
    )
    graph = gi.infer_shapes(gi.lower(arch, default_config), (3, 32, 32))
    path = tmp_path / "graph.json"
    gi.save_graph(graph, path)
    loaded = gi.load_graph(path)
    assert loaded.input_id == graph.input_id
    assert loaded.output_id == graph.output_id
    assert set(loaded.nodes) == set(graph.nodes)
    for nid, node in graph.nodes.items():
        other = loaded.nodes[nid]
        assert (other.op, other.params, other.inputs, other.shape) == (
            node.op,
            node.params,
            node.inputs,
            node.shape,
        )


def test_graph_json_rejects_unknown_op():
    doc = {
        "input_id": 0,
        "output_id": 0,
        "nodes": [{"id": 0, "op": "warpdrive", "params": {}, "inputs": [], "shape": None}],
    }
    with pytest.raises(GraphStructureError):
        gi.graph_from_json(doc)

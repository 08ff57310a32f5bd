"""Layer-level graph IR: lowering, shape inference, scheduling, JSON dump.

Every block of an architecture descriptor expands into a small subgraph of
primitive layer nodes.  Attention and feed-forward layers are modeled as
single fused nodes (their internal 1x1-convolution projections are part of
the node), so the graph stays close to what a deployment compiler sees.

Shape convention: tensors are (channels, height, width) with an implicit
batch of 1.  Convolutions pad with floor(kernel/2) so stride-1 convolutions
preserve resolution; pooling never pads.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from hybridnas.errors import GraphStructureError, ShapeUnderflowError
from hybridnas.space import (
    ArchitectureDescriptor,
    CNNBlockSpec,
    ClassifierSpec,
    HybridViTBlockSpec,
    PoolingBlockSpec,
    SearchSpaceConfig,
)

# Fixed internal channel ratios of the composite CNN blocks (ResNet /
# MobileNetV2 conventions).  Deliberately not searchable.
BOTTLENECK_REDUCTION = 4
INVERTED_EXPANSION = 4

OP_KINDS = (
    "input",
    "conv2d",
    "batchnorm",
    "relu",
    "maxpool",
    "avgpool",
    "combinedpool",
    "add",
    "mhsa",
    "feedforward",
    "globalavgpool",
    "linear",
)

_POOL_OPS = {"max": "maxpool", "avg": "avgpool", "combined": "combinedpool"}


@dataclass
class LayerNode:
    """One primitive layer. ``shape`` is the output shape, filled by inference."""

    id: int
    op: str
    params: dict
    inputs: tuple[int, ...]
    block_index: int
    shape: tuple[int, int, int] | None = None


@dataclass
class NetworkGraph:
    """Single-input single-output DAG of layer nodes."""

    nodes: dict[int, LayerNode]
    input_id: int
    output_id: int
    _schedule: tuple[int, ...] | None = field(default=None, repr=False)

    def node(self, node_id: int) -> LayerNode:
        return self.nodes[node_id]

    def consumers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for src in node.inputs:
                out[src].append(node.id)
        return out

    def __len__(self) -> int:
        return len(self.nodes)


class _Builder:
    def __init__(self):
        self.nodes: dict[int, LayerNode] = {}
        self.next_id = 0

    def add(self, op: str, params: dict, inputs: Iterable[int], block_index: int) -> int:
        node_id = self.next_id
        self.next_id += 1
        self.nodes[node_id] = LayerNode(
            id=node_id, op=op, params=params, inputs=tuple(inputs), block_index=block_index
        )
        return node_id


def _conv_bn(builder, x, in_ch, out_ch, kernel, stride, groups, block, relu=True):
    """Conv -> BN [-> ReLU]; returns output node id."""
    conv = builder.add(
        "conv2d",
        {
            "kernel": kernel,
            "stride": stride,
            "padding": kernel // 2,
            "groups": groups,
            "in_channels": in_ch,
            "out_channels": out_ch,
        },
        [x],
        block,
    )
    bn = builder.add("batchnorm", {"channels": out_ch}, [conv], block)
    if relu:
        return builder.add("relu", {}, [bn], block)
    return bn


def _skip_projection(builder, x, in_ch, out_ch, stride, block):
    # Unconditional 1x1 projection on the skip branch, stride-matched.
    return _conv_bn(builder, x, in_ch, out_ch, kernel=1, stride=stride, groups=1, block=block, relu=False)


def _lower_cnn_block(builder, x, in_ch, spec: CNNBlockSpec, block) -> tuple[int, int]:
    k, s, out_ch, g = spec.kernel_size, spec.stride, spec.out_channels, spec.groups
    if spec.kind == "residual":
        main = _conv_bn(builder, x, in_ch, out_ch, k, s, g, block, relu=True)
        main = _conv_bn(builder, main, out_ch, out_ch, k, 1, g, block, relu=False)
        skip = _skip_projection(builder, x, in_ch, out_ch, s, block)
        added = builder.add("add", {}, [main, skip], block)
        return builder.add("relu", {}, [added], block), out_ch
    if spec.kind == "bottleneck":
        mid = max(out_ch // BOTTLENECK_REDUCTION, 1)
        main = _conv_bn(builder, x, in_ch, mid, 1, 1, 1, block, relu=True)
        main = _conv_bn(builder, main, mid, mid, k, s, g, block, relu=True)
        main = _conv_bn(builder, main, mid, out_ch, 1, 1, 1, block, relu=False)
        skip = _skip_projection(builder, x, in_ch, out_ch, s, block)
        added = builder.add("add", {}, [main, skip], block)
        return builder.add("relu", {}, [added], block), out_ch
    if spec.kind == "inverted_bottleneck":
        mid = in_ch * INVERTED_EXPANSION
        main = _conv_bn(builder, x, in_ch, mid, 1, 1, 1, block, relu=True)
        # depthwise: one filter per channel
        main = _conv_bn(builder, main, mid, mid, k, s, mid, block, relu=True)
        main = _conv_bn(builder, main, mid, out_ch, 1, 1, 1, block, relu=False)
        skip = _skip_projection(builder, x, in_ch, out_ch, s, block)
        # MobileNetV2 keeps the block output linear: no ReLU after the add.
        return builder.add("add", {}, [main, skip], block), out_ch
    raise GraphStructureError(f"unknown CNN block kind {spec.kind!r}")


def _lower_pool_block(builder, x, spec: PoolingBlockSpec, block) -> int:
    return builder.add(
        _POOL_OPS[spec.kind], {"kernel": spec.kernel_size, "stride": spec.stride}, [x], block
    )


def _lower_vit_block(builder, x, in_ch, spec: HybridViTBlockSpec, block) -> tuple[int, int]:
    ch = in_ch
    if isinstance(spec.prefix, CNNBlockSpec):
        x, ch = _lower_cnn_block(builder, x, ch, spec.prefix, block)
    elif isinstance(spec.prefix, PoolingBlockSpec):
        x = _lower_pool_block(builder, x, spec.prefix, block)

    # y = x + BN(MHSA(x)); the residual path stays identity.
    mhsa = builder.add(
        "mhsa",
        {"heads": spec.heads, "d_model": ch, "qkv_dim": spec.qkv_dim, "attn_kind": spec.attn_kind},
        [x],
        block,
    )
    bn = builder.add("batchnorm", {"channels": ch}, [mhsa], block)
    x = builder.add("add", {}, [x, bn], block)

    if spec.use_ff:
        ff = builder.add("feedforward", {"d_model": ch, "ff_dim": spec.ff_dim}, [x], block)
        bn = builder.add("batchnorm", {"channels": ch}, [ff], block)
        x = builder.add("add", {}, [x, bn], block)
    return x, ch


def lower(arch: ArchitectureDescriptor, config: SearchSpaceConfig) -> NetworkGraph:
    """Expand every block into primitive layer nodes, in skeleton order."""
    builder = _Builder()
    input_id = builder.add("input", {}, [], -1)
    x = input_id
    ch = config.input_shape[0]

    for index, block in enumerate(arch.blocks):
        if isinstance(block, CNNBlockSpec):
            x, ch = _lower_cnn_block(builder, x, ch, block, index)
        elif isinstance(block, PoolingBlockSpec):
            x = _lower_pool_block(builder, x, block, index)
        elif isinstance(block, HybridViTBlockSpec):
            x, ch = _lower_vit_block(builder, x, ch, block, index)
        elif isinstance(block, ClassifierSpec):
            gap = builder.add("globalavgpool", {}, [x], index)
            x = builder.add(
                "linear", {"in_dim": ch, "out_dim": block.num_classes}, [gap], index
            )
        else:
            raise GraphStructureError(f"unknown block spec {type(block).__name__}")

    return NetworkGraph(nodes=builder.nodes, input_id=input_id, output_id=x)


# ---------------------------------------------------------------------------
# Shape inference
# ---------------------------------------------------------------------------


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def infer_shapes(
    graph: NetworkGraph, input_shape: tuple[int, int, int]
) -> NetworkGraph:
    """Annotate every node with its output shape, in schedule order.

    Raises ShapeUnderflowError naming the first node whose output would have
    a spatial dimension below 1.
    """
    shapes: dict[int, tuple[int, int, int]] = {}
    for node_id in topological_schedule(graph):
        node = graph.nodes[node_id]
        if node.op == "input":
            out = tuple(int(v) for v in input_shape)
        elif node.op == "conv2d":
            c, h, w = shapes[node.inputs[0]]
            p = node.params["padding"]
            k, s = node.params["kernel"], node.params["stride"]
            out = (node.params["out_channels"], _conv_out(h, k, s, p), _conv_out(w, k, s, p))
        elif node.op in ("maxpool", "avgpool", "combinedpool"):
            c, h, w = shapes[node.inputs[0]]
            k, s = node.params["kernel"], node.params["stride"]
            out = (c, _conv_out(h, k, s, 0), _conv_out(w, k, s, 0))
        elif node.op == "add":
            a, b = (shapes[i] for i in node.inputs)
            if a != b:
                raise GraphStructureError(f"add node {node.id}: operand shapes {a} != {b}")
            out = a
        elif node.op in ("batchnorm", "relu", "mhsa", "feedforward"):
            out = shapes[node.inputs[0]]
        elif node.op == "globalavgpool":
            c, _, _ = shapes[node.inputs[0]]
            out = (c, 1, 1)
        elif node.op == "linear":
            out = (node.params["out_dim"], 1, 1)
        else:
            raise GraphStructureError(f"unknown op {node.op!r}")
        if out[1] < 1 or out[2] < 1:
            raise ShapeUnderflowError(node.id, node.op, f"output shape {out} underflows")
        shapes[node_id] = out
        node.shape = out
    return graph


def token_count(shape: tuple[int, int, int]) -> int:
    """Attention token count of a feature map: N = H * W."""
    return shape[1] * shape[2]


# ---------------------------------------------------------------------------
# Scheduling
# ---------------------------------------------------------------------------


def topological_schedule(graph: NetworkGraph) -> tuple[int, ...]:
    """Deterministic topological order; ties broken by ascending node id."""
    if graph._schedule is not None:
        return graph._schedule
    indegree = {nid: len(node.inputs) for nid, node in graph.nodes.items()}
    ready = [nid for nid, deg in indegree.items() if deg == 0]
    heapq.heapify(ready)
    consumers = graph.consumers()
    order: list[int] = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for succ in consumers[nid]:
            indegree[succ] -= 1
            if indegree[succ] == 0:
                heapq.heappush(ready, succ)
    if len(order) != len(graph.nodes):
        raise GraphStructureError("graph contains a cycle")
    graph._schedule = tuple(order)
    return graph._schedule


# ---------------------------------------------------------------------------
# JSON dump / load
# ---------------------------------------------------------------------------


def graph_to_json(graph: NetworkGraph) -> dict:
    """Serializable form of the graph, for debugging and the trainer bridge."""
    return {
        "input_id": graph.input_id,
        "output_id": graph.output_id,
        "nodes": [
            {
                "id": node.id,
                "op": node.op,
                "params": node.params,
                "inputs": list(node.inputs),
                "block": node.block_index,
                "shape": list(node.shape) if node.shape else None,
            }
            for node in (graph.nodes[nid] for nid in sorted(graph.nodes))
        ],
    }


def graph_from_json(doc: dict) -> NetworkGraph:
    nodes = {}
    for entry in doc["nodes"]:
        if entry["op"] not in OP_KINDS:
            raise GraphStructureError(f"unknown op_kind {entry['op']!r} in graph JSON")
        nodes[int(entry["id"])] = LayerNode(
            id=int(entry["id"]),
            op=entry["op"],
            params=dict(entry["params"]),
            inputs=tuple(int(i) for i in entry["inputs"]),
            block_index=int(entry.get("block", -1)),
            shape=tuple(entry["shape"]) if entry.get("shape") else None,
        )
    return NetworkGraph(nodes=nodes, input_id=int(doc["input_id"]), output_id=int(doc["output_id"]))


def save_graph(graph: NetworkGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_json(graph), fh, indent=2)
        fh.write("\n")


def load_graph(path: str | Path) -> NetworkGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return graph_from_json(json.load(fh))

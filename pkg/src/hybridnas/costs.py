"""Analytical per-architecture metrics: params, MACs, ROM, peak RAM, latency proxy.

Parameter and MAC formulas mirror the reference kernels exactly (checked by
the acceptance suite).  ROM/RAM/latency are tunable proxies: they preserve
orderings between candidates rather than reproduce any particular target
toolchain's absolute numbers.  RAM is the peak of a liveness simulation
over the execution schedule, counting activations only; weights are
assumed flash-resident.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from hybridnas.errors import ConfigurationError
from hybridnas.graph import NetworkGraph, token_count, topological_schedule

DEFAULT_LATENCY_COEFFICIENTS = {
    "conv2d": 1.0,
    "linear": 1.0,
    "feedforward": 1.0,
    "mhsa_softmax": 1.3,  # exponential overhead of the softmax path
    "mhsa_linear": 1.0,
}


@dataclass(frozen=True)
class DeploymentAssumptions:
    """Tunable constants behind the ROM/RAM/latency proxies (int8-style defaults)."""

    bytes_per_weight: int = 1
    bytes_per_activation: int = 1
    code_overhead_bytes: int = 120_000
    latency_coefficients: dict = field(default_factory=lambda: dict(DEFAULT_LATENCY_COEFFICIENTS))
    mem_coefficient: float = 0.1
    in_place_norm_act: bool = True  # ReLU/BN output aliases its input buffer

    def __post_init__(self):
        if self.bytes_per_weight <= 0 or self.bytes_per_activation <= 0:
            raise ConfigurationError("byte sizes must be positive")
        if self.code_overhead_bytes <= 0:
            raise ConfigurationError("code_overhead_bytes must be positive")
        if self.mem_coefficient < 0 or any(v <= 0 for v in self.latency_coefficients.values()):
            raise ConfigurationError("latency coefficients must be positive")

    def latency_coefficient(self, node) -> float:
        key = node.op
        if node.op == "mhsa":
            key = f"mhsa_{node.params['attn_kind']}"
        return self.latency_coefficients.get(key, 1.0)


def assumptions_from_json(doc: dict) -> DeploymentAssumptions:
    coeffs = dict(DEFAULT_LATENCY_COEFFICIENTS)
    coeffs.update(doc.get("latency_coefficients", {}))
    return DeploymentAssumptions(
        bytes_per_weight=int(doc.get("bytes_per_weight", 1)),
        bytes_per_activation=int(doc.get("bytes_per_activation", 1)),
        code_overhead_bytes=int(doc.get("code_overhead_bytes", 120_000)),
        latency_coefficients=coeffs,
        mem_coefficient=float(doc.get("mem_coefficient", 0.1)),
        in_place_norm_act=bool(doc.get("in_place_norm_act", True)),
    )


def load_assumptions(path: str | Path) -> DeploymentAssumptions:
    with open(path, "r", encoding="utf-8") as fh:
        return assumptions_from_json(json.load(fh))


@dataclass(frozen=True)
class CostReport:
    """Per-architecture metrics plus the per-node params/MACs breakdown."""

    params: int
    macs: int
    rom_bytes: int
    ram_bytes: int
    latency_proxy: float
    per_node_params: dict[int, int]
    per_node_macs: dict[int, int]

    def to_json(self) -> dict:
        return {
            "params": self.params,
            "macs": self.macs,
            "rom_bytes": self.rom_bytes,
            "ram_bytes": self.ram_bytes,
            "latency_proxy": self.latency_proxy,
            "per_node": {
                str(nid): {
                    "params": self.per_node_params.get(nid, 0),
                    "macs": self.per_node_macs.get(nid, 0),
                }
                for nid in sorted(set(self.per_node_params) | set(self.per_node_macs))
            },
        }


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def node_params(node) -> int:
    if node.op == "conv2d":
        p = node.params
        return p["out_channels"] * (p["in_channels"] // p["groups"]) * p["kernel"] ** 2
    if node.op == "batchnorm":
        return 2 * node.params["channels"]
    if node.op == "mhsa":
        d, qkv = node.params["d_model"], node.params["qkv_dim"]
        return d * qkv * 3 + qkv * d
    if node.op == "feedforward":
        return 2 * node.params["d_model"] * node.params["ff_dim"]
    if node.op == "linear":
        return node.params["in_dim"] * node.params["out_dim"] + node.params["out_dim"]
    return 0


def count_params(graph: NetworkGraph) -> tuple[int, dict[int, int]]:
    per_node = {nid: node_params(node) for nid, node in graph.nodes.items()}
    return sum(per_node.values()), per_node


# ---------------------------------------------------------------------------
# MACs
# ---------------------------------------------------------------------------


def _require_shape(node):
    if node.shape is None:
        raise ConfigurationError(f"node {node.id} has no inferred shape; run infer_shapes first")
    return node.shape


def node_macs(graph: NetworkGraph, node) -> int:
    if node.op == "conv2d":
        p = node.params
        _, h_out, w_out = _require_shape(node)
        return p["out_channels"] * h_out * w_out * (p["in_channels"] // p["groups"]) * p["kernel"] ** 2
    if node.op == "mhsa":
        p = node.params
        n = token_count(_require_shape(node))
        d, qkv, heads = p["d_model"], p["qkv_dim"], p["heads"]
        projections = n * d * qkv * 3
        output = n * qkv * d
        if p["attn_kind"] == "softmax":
            return projections + 2 * n * n * qkv + output
        return projections + 2 * n * (qkv // heads) * qkv + output
    if node.op == "feedforward":
        n = token_count(_require_shape(node))
        return 2 * n * node.params["d_model"] * node.params["ff_dim"]
    if node.op == "linear":
        return node.params["in_dim"] * node.params["out_dim"]
    return 0


def count_macs(graph: NetworkGraph) -> tuple[int, dict[int, int]]:
    per_node = {nid: node_macs(graph, node) for nid, node in graph.nodes.items()}
    return sum(per_node.values()), per_node


def mhsa_mac_terms(node) -> dict[str, int]:
    """Projection / attention-path split of one attention node's MACs."""
    p = node.params
    n = token_count(_require_shape(node))
    d, qkv, heads = p["d_model"], p["qkv_dim"], p["heads"]
    projections = n * d * qkv * 3 + n * qkv * d
    if p["attn_kind"] == "softmax":
        attention_path = 2 * n * n * qkv
    else:
        attention_path = 2 * n * (qkv // heads) * qkv
    return {"projections": projections, "attention_path": attention_path}


# ---------------------------------------------------------------------------
# ROM / RAM
# ---------------------------------------------------------------------------


def estimate_rom(graph: NetworkGraph, assumptions: DeploymentAssumptions) -> int:
    total, _ = count_params(graph)
    return total * assumptions.bytes_per_weight + assumptions.code_overhead_bytes


def _elements(shape: tuple[int, int, int]) -> int:
    return shape[0] * shape[1] * shape[2]


def _buffer_roots(graph: NetworkGraph, in_place: bool) -> dict[int, int]:
    """Map node id -> id of the buffer its output lives in.

    With in-place norm/activation, ReLU and BN reuse their input's buffer.
    """
    roots: dict[int, int] = {}
    for node_id in topological_schedule(graph):
        node = graph.nodes[node_id]
        if in_place and node.op in ("relu", "batchnorm"):
            roots[node_id] = roots[node.inputs[0]]
        else:
            roots[node_id] = node_id
    return roots


def estimate_ram(graph: NetworkGraph, assumptions: DeploymentAssumptions) -> int:
    """Peak activation bytes over a liveness simulation of the schedule.

    A buffer is live from the step that first writes it until the last step
    that reads any node aliased to it.  Weights are not counted.
    """
    schedule = topological_schedule(graph)
    position = {nid: i for i, nid in enumerate(schedule)}
    roots = _buffer_roots(graph, assumptions.in_place_norm_act)

    first_write: dict[int, int] = {}
    last_read: dict[int, int] = {}
    for nid in schedule:
        node = graph.nodes[nid]
        root = roots[nid]
        pos = position[nid]
        first_write.setdefault(root, pos)
        last_read[root] = max(last_read.get(root, pos), pos)
        for src in node.inputs:
            src_root = roots[src]
            last_read[src_root] = max(last_read.get(src_root, pos), pos)

    sizes = {
        root: _elements(_require_shape(graph.nodes[root])) for root in set(roots.values())
    }
    peak = 0
    for step in range(len(schedule)):
        live = sum(
            sizes[root]
            for root in sizes
            if first_write[root] <= step <= last_read[root]
        )
        peak = max(peak, live)
    return peak * assumptions.bytes_per_activation


# ---------------------------------------------------------------------------
# Latency proxy
# ---------------------------------------------------------------------------


def latency_proxy(graph: NetworkGraph, assumptions: DeploymentAssumptions) -> float:
    """Sum of coefficient-weighted MACs plus a memory-traffic term."""
    _, per_node_macs = count_macs(graph)
    score = 0.0
    for node in graph.nodes.values():
        in_bytes = sum(
            _elements(_require_shape(graph.nodes[src])) for src in node.inputs
        ) * assumptions.bytes_per_activation
        out_bytes = _elements(_require_shape(node)) * assumptions.bytes_per_activation
        score += assumptions.latency_coefficient(node) * per_node_macs[node.id]
        score += assumptions.mem_coefficient * (in_bytes + out_bytes)
    return score


def evaluate_costs(
    graph: NetworkGraph, assumptions: DeploymentAssumptions | None = None
) -> CostReport:
    """Full metric sweep for one shape-annotated graph."""
    assumptions = assumptions or DeploymentAssumptions()
    params_total, params_per_node = count_params(graph)
    macs_total, macs_per_node = count_macs(graph)
    return CostReport(
        params=params_total,
        macs=macs_total,
        rom_bytes=estimate_rom(graph, assumptions),
        ram_bytes=estimate_ram(graph, assumptions),
        latency_proxy=latency_proxy(graph, assumptions),
        per_node_params=params_per_node,
        per_node_macs=macs_per_node,
    )

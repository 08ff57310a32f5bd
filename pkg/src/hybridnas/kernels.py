"""Reference forward kernels with multiply-accumulate instrumentation.

These are the ground-truth implementations the analytical cost model is
checked against.  Everything runs in float64 on numpy arrays; a kernel
increments the per-node MAC counter by the number of scalar multiplies it
performs.  Exponentials, divisions, ReLU, pooling comparisons and
batch-norm arithmetic count zero MACs.

Shape conventions: feature maps are (C, H, W); token matrices are (N, d).
Attention and feed-forward kernels operate on the token view; the network
executor reshapes maps to N = H*W tokens of dimension C around them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hybridnas.errors import KernelError
from hybridnas.graph import NetworkGraph, topological_schedule

BN_EPSILON = 1e-5
INIT_SCALE = 0.1  # weights drawn from uniform[-0.1, 0.1]


@dataclass
class OpCounter:
    """Per-node multiply-accumulate tally for one forward pass."""

    per_node: dict[int, int] = field(default_factory=dict)

    def add(self, node_id: int, macs: int) -> None:
        if macs < 0:
            raise KernelError("counter decrement")
        self.per_node[node_id] = self.per_node.get(node_id, 0) + int(macs)

    @property
    def total(self) -> int:
        return sum(self.per_node.values())


# ---------------------------------------------------------------------------
# Convolution / batch norm / pooling
# ---------------------------------------------------------------------------


def conv2d(
    x: np.ndarray,
    weight: np.ndarray,
    *,
    stride: int,
    padding: int,
    groups: int,
    counter: OpCounter | None = None,
    node_id: int = -1,
) -> np.ndarray:
    """Grouped 2-D cross-correlation with zero padding, no bias."""
    in_ch, h, w = x.shape
    out_ch, in_per_group, k, _ = weight.shape
    if in_ch % groups != 0 or out_ch % groups != 0:
        raise KernelError(f"channels ({in_ch} -> {out_ch}) not divisible by groups={groups}")
    if in_per_group != in_ch // groups:
        raise KernelError(
            f"weight expects {in_per_group} channels/group, input has {in_ch // groups}"
        )
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    if xp.shape[1] < k or xp.shape[2] < k:
        raise KernelError(f"kernel {k} exceeds padded input {xp.shape[1:]} ")
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    h_out, w_out = windows.shape[1], windows.shape[2]
    out_per_group = out_ch // groups
    outputs = []
    for g in range(groups):
        win_g = windows[g * in_per_group : (g + 1) * in_per_group]
        w_g = weight[g * out_per_group : (g + 1) * out_per_group]
        outputs.append(np.einsum("ihwkl,oikl->ohw", win_g, w_g))
    y = np.concatenate(outputs, axis=0)
    if counter is not None:
        counter.add(node_id, out_ch * h_out * w_out * in_per_group * k * k)
    return y


def batchnorm_eval(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = BN_EPSILON,
) -> np.ndarray:
    """Eval-mode batch norm over the channel axis of a (C, H, W) map."""
    denom = var + eps
    if np.any(denom <= 0):
        raise KernelError("batchnorm: var + eps <= 0")
    scale = gamma / np.sqrt(denom)
    shift = beta - mean * scale
    return x * scale[:, None, None] + shift[:, None, None]


def fold_batchnorm(
    conv_weight: np.ndarray,
    conv_bias: np.ndarray | None,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = BN_EPSILON,
) -> tuple[np.ndarray, np.ndarray]:
    """Fold eval-mode BN into the preceding convolution.

    Returns (weight', bias') such that conv'(x) == bn(conv(x)).
    """
    denom = var + eps
    if np.any(denom <= 0):
        raise KernelError("fold_batchnorm: var + eps <= 0")
    scale = gamma / np.sqrt(denom)
    weight = conv_weight * scale[:, None, None, None]
    bias = conv_bias if conv_bias is not None else np.zeros_like(mean)
    bias = (bias - mean) * scale + beta
    return weight, bias


def pool(
    x: np.ndarray,
    kind: str,
    kernel: int,
    stride: int,
    counter: OpCounter | None = None,
    node_id: int = -1,
) -> np.ndarray:
    """Max / average / combined pooling; combined averages the two outputs."""
    _, h, w = x.shape
    if h < kernel or w < kernel:
        raise KernelError(f"pool window {kernel} exceeds input {h}x{w}")
    windows = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    if kind == "max":
        y = windows.max(axis=(-2, -1))
    elif kind == "avg":
        y = windows.mean(axis=(-2, -1))
    elif kind == "combined":
        y = 0.5 * windows.max(axis=(-2, -1)) + 0.5 * windows.mean(axis=(-2, -1))
    else:
        raise KernelError(f"unknown pool kind {kind!r}")
    if counter is not None:
        counter.add(node_id, 0)  # comparisons and averaging are MAC-free
    return y


# ---------------------------------------------------------------------------
# Attention and feed-forward (token view)
# ---------------------------------------------------------------------------


def _split_heads(m: np.ndarray, heads: int) -> np.ndarray:
    n, dim = m.shape
    return m.reshape(n, heads, dim // heads).transpose(1, 0, 2)  # (heads, N, d_head)


def _merge_heads(m: np.ndarray) -> np.ndarray:
    heads, n, d_head = m.shape
    return m.transpose(1, 0, 2).reshape(n, heads * d_head)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def mhsa_softmax(
    x: np.ndarray,
    w_q: np.ndarray,
    w_k: np.ndarray,
    w_v: np.ndarray,
    w_a: np.ndarray,
    heads: int,
    counter: OpCounter | None = None,
    node_id: int = -1,
    return_attention: bool = False,
):
    """Standard multi-head attention with per-head 1/sqrt(d_head) scaling."""
    n, d_model = x.shape
    qkv_dim = w_q.shape[1]
    if qkv_dim % heads != 0:
        raise KernelError(f"qkv_dim={qkv_dim} not divisible by heads={heads}")
    d_head = qkv_dim // heads

    q = _split_heads(x @ w_q, heads)
    k = _split_heads(x @ w_k, heads)
    v = _split_heads(x @ w_v, heads)
    attention = softmax_rows(q @ k.transpose(0, 2, 1) / np.sqrt(d_head))
    out = _merge_heads(attention @ v) @ w_a

    if not np.all(np.isfinite(out)):
        raise KernelError("mhsa_softmax produced non-finite values")
    if counter is not None:
        projections = n * d_model * qkv_dim * 3
        scores_and_sum = 2 * n * n * qkv_dim
        output = n * qkv_dim * d_model
        counter.add(node_id, projections + scores_and_sum + output)
    if return_attention:
        return out, attention
    return out


def mhsa_linear(
    x: np.ndarray,
    w_q: np.ndarray,
    w_k: np.ndarray,
    w_v: np.ndarray,
    w_a: np.ndarray,
    heads: int,
    counter: OpCounter | None = None,
    node_id: int = -1,
) -> np.ndarray:
    """ReLU-based linear attention: Q' (K'^T V) W_A, factored order, no softmax."""
    n, d_model = x.shape
    qkv_dim = w_q.shape[1]
    if qkv_dim % heads != 0:
        raise KernelError(f"qkv_dim={qkv_dim} not divisible by heads={heads}")
    d_head = qkv_dim // heads

    q = _split_heads(np.maximum(x @ w_q, 0.0), heads)
    k = _split_heads(np.maximum(x @ w_k, 0.0), heads)
    v = _split_heads(x @ w_v, heads)
    context = k.transpose(0, 2, 1) @ v  # (heads, d_head, d_head)
    out = _merge_heads(q @ context) @ w_a

    if not np.all(np.isfinite(out)):
        raise KernelError("mhsa_linear produced non-finite values")
    if counter is not None:
        projections = n * d_model * qkv_dim * 3
        factored = 2 * n * d_head * qkv_dim  # K'^T V and Q' (K'^T V), summed over heads
        output = n * qkv_dim * d_model
        counter.add(node_id, projections + factored + output)
    return out


def feedforward(
    x: np.ndarray,
    w_1: np.ndarray,
    w_2: np.ndarray,
    counter: OpCounter | None = None,
    node_id: int = -1,
) -> np.ndarray:
    """FF(x) = ReLU(x W_1) W_2."""
    n, d_model = x.shape
    if w_1.shape[0] != d_model or w_2.shape[0] != w_1.shape[1]:
        raise KernelError(f"feedforward weight shapes {w_1.shape}/{w_2.shape} mismatch input {x.shape}")
    y = np.maximum(x @ w_1, 0.0) @ w_2
    if counter is not None:
        counter.add(node_id, 2 * n * d_model * w_1.shape[1])
    return y


def linear_layer(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    counter: OpCounter | None = None,
    node_id: int = -1,
) -> np.ndarray:
    if x.shape[0] != weight.shape[0]:
        raise KernelError(f"linear expects {weight.shape[0]} features, got {x.shape[0]}")
    if counter is not None:
        counter.add(node_id, weight.shape[0] * weight.shape[1])
    return x @ weight + bias


# ---------------------------------------------------------------------------
# Parameter materialization
# ---------------------------------------------------------------------------


@dataclass
class NodeParams:
    """Learnable arrays plus (for BN) running statistics."""

    learnable: dict[str, np.ndarray] = field(default_factory=dict)
    stats: dict[str, np.ndarray] = field(default_factory=dict)

    def element_count(self) -> int:
        return int(sum(a.size for a in self.learnable.values()))


LayerParamsMap = dict[int, NodeParams]


def init_params(graph: NetworkGraph, seed: int) -> LayerParamsMap:
    """Deterministic parameter init: uniform[-0.1, 0.1] weights, identity BN."""
    rng = np.random.default_rng(seed)

    def uniform(*shape):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

    params: LayerParamsMap = {}
    for node_id in topological_schedule(graph):
        node = graph.nodes[node_id]
        p = NodeParams()
        if node.op == "conv2d":
            k = node.params["kernel"]
            p.learnable["weight"] = uniform(
                node.params["out_channels"],
                node.params["in_channels"] // node.params["groups"],
                k,
                k,
            )
        elif node.op == "batchnorm":
            ch = node.params["channels"]
            p.learnable["gamma"] = np.ones(ch)
            p.learnable["beta"] = np.zeros(ch)
            p.stats["mean"] = np.zeros(ch)
            p.stats["var"] = np.ones(ch)
        elif node.op == "mhsa":
            d, qkv = node.params["d_model"], node.params["qkv_dim"]
            p.learnable["w_q"] = uniform(d, qkv)
            p.learnable["w_k"] = uniform(d, qkv)
            p.learnable["w_v"] = uniform(d, qkv)
            p.learnable["w_a"] = uniform(qkv, d)
        elif node.op == "feedforward":
            d, ff = node.params["d_model"], node.params["ff_dim"]
            p.learnable["w_1"] = uniform(d, ff)
            p.learnable["w_2"] = uniform(ff, d)
        elif node.op == "linear":
            p.learnable["weight"] = uniform(node.params["in_dim"], node.params["out_dim"])
            p.learnable["bias"] = uniform(node.params["out_dim"])
        params[node_id] = p
    return params


def count_learnable_elements(params: LayerParamsMap) -> tuple[int, dict[int, int]]:
    per_node = {nid: p.element_count() for nid, p in params.items()}
    return sum(per_node.values()), per_node


def params_to_json(params: LayerParamsMap) -> dict:
    return {
        str(nid): {
            "learnable": {k: v.tolist() for k, v in p.learnable.items()},
            "stats": {k: v.tolist() for k, v in p.stats.items()},
        }
        for nid, p in params.items()
    }


def params_from_json(doc: dict) -> LayerParamsMap:
    out: LayerParamsMap = {}
    for nid, entry in doc.items():
        p = NodeParams(
            learnable={k: np.asarray(v, dtype=np.float64) for k, v in entry["learnable"].items()},
            stats={k: np.asarray(v, dtype=np.float64) for k, v in entry["stats"].items()},
        )
        out[int(nid)] = p
    return out


def save_params(params: LayerParamsMap, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_json(params), fh)


# ---------------------------------------------------------------------------
# Network execution
# ---------------------------------------------------------------------------


def map_to_tokens(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (N, C) with token index n = h * W + w."""
    c = x.shape[0]
    return x.reshape(c, -1).T


def tokens_to_map(tokens: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    return tokens.T.reshape(c, h, w)


def network_forward(
    graph: NetworkGraph,
    params: LayerParamsMap,
    input_tensor: np.ndarray,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Execute the graph on one input map; returns the logits vector."""
    values: dict[int, np.ndarray] = {}
    for node_id in topological_schedule(graph):
        node = graph.nodes[node_id]
        p = params.get(node_id, NodeParams())
        if node.op == "input":
            if tuple(input_tensor.shape) != tuple(node.shape or input_tensor.shape):
                raise KernelError(
                    f"input shape {input_tensor.shape} != graph input {node.shape}"
                )
            out = np.asarray(input_tensor, dtype=np.float64)
        elif node.op == "conv2d":
            out = conv2d(
                values[node.inputs[0]],
                p.learnable["weight"],
                stride=node.params["stride"],
                padding=node.params["padding"],
                groups=node.params["groups"],
                counter=counter,
                node_id=node_id,
            )
        elif node.op == "batchnorm":
            out = batchnorm_eval(
                values[node.inputs[0]],
                p.learnable["gamma"],
                p.learnable["beta"],
                p.stats["mean"],
                p.stats["var"],
            )
        elif node.op == "relu":
            out = np.maximum(values[node.inputs[0]], 0.0)
        elif node.op in ("maxpool", "avgpool", "combinedpool"):
            out = pool(
                values[node.inputs[0]],
                node.op.removesuffix("pool"),
                node.params["kernel"],
                node.params["stride"],
                counter=counter,
                node_id=node_id,
            )
        elif node.op == "add":
            out = values[node.inputs[0]] + values[node.inputs[1]]
        elif node.op == "mhsa":
            x_map = values[node.inputs[0]]
            tokens = map_to_tokens(x_map)
            fn = mhsa_softmax if node.params["attn_kind"] == "softmax" else mhsa_linear
            y = fn(
                tokens,
                p.learnable["w_q"],
                p.learnable["w_k"],
                p.learnable["w_v"],
                p.learnable["w_a"],
                node.params["heads"],
                counter=counter,
                node_id=node_id,
            )
            out = tokens_to_map(y, x_map.shape)
        elif node.op == "feedforward":
            x_map = values[node.inputs[0]]
            y = feedforward(
                map_to_tokens(x_map),
                p.learnable["w_1"],
                p.learnable["w_2"],
                counter=counter,
                node_id=node_id,
            )
            out = tokens_to_map(y, x_map.shape)
        elif node.op == "globalavgpool":
            out = values[node.inputs[0]].mean(axis=(1, 2))
        elif node.op == "linear":
            out = linear_layer(
                values[node.inputs[0]],
                p.learnable["weight"],
                p.learnable["bias"],
                counter=counter,
                node_id=node_id,
            )
        else:
            raise KernelError(f"unknown op {node.op!r}")
        values[node_id] = out
    return values[graph.output_id]

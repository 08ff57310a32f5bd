"""Torch modules built node-for-node from the engine's graph JSON.

Attention and feed-forward projections are 1x1 convolutions so eval-mode
batch norm can always be folded into a preceding convolution.  The linear
attention variant computes the factored order ReLU(Q) @ (ReLU(K)^T V)
with no softmax and no scaling.
"""

from __future__ import annotations

import heapq
import math

import torch
import torch.nn as nn


class BuildError(Exception):
    """Graph JSON cannot be turned into a model."""


class CombinedPool(nn.Module):
    """0.5 * maxpool + 0.5 * avgpool with shared kernel/stride."""

    def __init__(self, kernel: int, stride: int):
        super().__init__()
        self.max_pool = nn.MaxPool2d(kernel, stride)
        self.avg_pool = nn.AvgPool2d(kernel, stride)

    def forward(self, x):
        return 0.5 * self.max_pool(x) + 0.5 * self.avg_pool(x)


class MultiHeadSelfAttention(nn.Module):
    """MHSA over the H*W token grid of a feature map.

    attn_kind "softmax": scaled dot-product attention per head.
    attn_kind "linear":  ReLU(Q) @ (ReLU(K)^T V), factored, unscaled.
    """

    def __init__(self, d_model: int, qkv_dim: int, heads: int, attn_kind: str):
        super().__init__()
        if qkv_dim % heads != 0:
            raise BuildError(f"qkv_dim={qkv_dim} not divisible by heads={heads}")
        if attn_kind not in ("softmax", "linear"):
            raise BuildError(f"unknown attn_kind {attn_kind!r}")
        self.heads = heads
        self.d_head = qkv_dim // heads
        self.attn_kind = attn_kind
        self.q_proj = nn.Conv2d(d_model, qkv_dim, 1, bias=False)
        self.k_proj = nn.Conv2d(d_model, qkv_dim, 1, bias=False)
        self.v_proj = nn.Conv2d(d_model, qkv_dim, 1, bias=False)
        self.out_proj = nn.Conv2d(qkv_dim, d_model, 1, bias=False)

    def _heads_view(self, m: torch.Tensor, n: int) -> torch.Tensor:
        # (B, qkv, H, W) -> (B, heads, N, d_head); channel c is qkv column c
        b = m.shape[0]
        return m.reshape(b, self.heads, self.d_head, n).transpose(2, 3)

    def forward(self, x):
        b, _, h, w = x.shape
        n = h * w
        q = self.q_proj(x)
        k = self.k_proj(x)
        v = self._heads_view(self.v_proj(x), n)
        if self.attn_kind == "softmax":
            q = self._heads_view(q, n)
            k = self._heads_view(k, n)
            scores = q @ k.transpose(2, 3) / math.sqrt(self.d_head)
            out = torch.softmax(scores, dim=-1) @ v
        else:
            q = self._heads_view(torch.relu(q), n)
            k = self._heads_view(torch.relu(k), n)
            out = q @ (k.transpose(2, 3) @ v)  # factored: (K'^T V) first
        out = out.transpose(2, 3).reshape(b, -1, h, w)
        return self.out_proj(out)


class FeedForward(nn.Module):
    """Two 1x1 convolutions with ReLU in between (token-wise linear layers)."""

    def __init__(self, d_model: int, ff_dim: int):
        super().__init__()
        self.expand = nn.Conv2d(d_model, ff_dim, 1, bias=False)
        self.out_proj = nn.Conv2d(ff_dim, d_model, 1, bias=False)

    def forward(self, x):
        return self.out_proj(torch.relu(self.expand(x)))


class GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3))


def _toposort(doc: dict) -> list[dict]:
    nodes = {int(n["id"]): n for n in doc["nodes"]}
    indegree = {nid: len(n["inputs"]) for nid, n in nodes.items()}
    ready = sorted(nid for nid, deg in indegree.items() if deg == 0)
    consumers: dict[int, list[int]] = {nid: [] for nid in nodes}
    for nid, node in nodes.items():
        for src in node["inputs"]:
            consumers[int(src)].append(nid)
    order = []
    heapq.heapify(ready)
    while ready:
        nid = heapq.heappop(ready)
        order.append(nodes[nid])
        for succ in consumers[nid]:
            indegree[succ] -= 1
            if indegree[succ] == 0:
                heapq.heappush(ready, succ)
    if len(order) != len(nodes):
        raise BuildError("graph JSON contains a cycle")
    return order


def _make_module(node: dict) -> nn.Module | None:
    op = node["op"]
    p = node["params"]
    if op == "conv2d":
        return nn.Conv2d(
            p["in_channels"],
            p["out_channels"],
            p["kernel"],
            stride=p["stride"],
            padding=p["padding"],
            groups=p["groups"],
            bias=False,
        )
    if op == "batchnorm":
        return nn.BatchNorm2d(p["channels"])
    if op == "relu":
        return nn.ReLU()
    if op == "maxpool":
        return nn.MaxPool2d(p["kernel"], p["stride"])
    if op == "avgpool":
        return nn.AvgPool2d(p["kernel"], p["stride"])
    if op == "combinedpool":
        return CombinedPool(p["kernel"], p["stride"])
    if op == "mhsa":
        return MultiHeadSelfAttention(p["d_model"], p["qkv_dim"], p["heads"], p["attn_kind"])
    if op == "feedforward":
        return FeedForward(p["d_model"], p["ff_dim"])
    if op == "globalavgpool":
        return GlobalAvgPool()
    if op == "linear":
        return nn.Linear(p["in_dim"], p["out_dim"], bias=True)
    if op in ("input", "add"):
        return None
    raise BuildError(f"unknown op_kind {op!r} at node {node['id']}")


class GraphNet(nn.Module):
    """Executes a lowered architecture graph module-for-module."""

    def __init__(self, graph_doc: dict):
        super().__init__()
        self.doc = graph_doc
        self.order = _toposort(graph_doc)
        self.output_id = int(graph_doc["output_id"])
        self.node_modules = nn.ModuleDict()
        for node in self.order:
            module = _make_module(node)
            if module is not None:
                self.node_modules[str(node["id"])] = module

    def forward(self, x):
        values: dict[int, torch.Tensor] = {}
        for node in self.order:
            nid = int(node["id"])
            op = node["op"]
            if op == "input":
                values[nid] = x
            elif op == "add":
                a, b = (values[int(i)] for i in node["inputs"])
                values[nid] = a + b
            else:
                values[nid] = self.node_modules[str(nid)](values[int(node["inputs"][0])])
        return values[self.output_id]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- weight exchange with the engine's reference kernels ----------------

    def load_reference_weights(self, weights_doc: dict) -> None:
        """Load a weights JSON dumped by the engine's reference runner.

        Reference conventions: conv filters (out, in/groups, k, k); token
        projections as (d_in, d_out) right-multiplication matrices; linear
        as weight (in, out) plus bias.
        """
        with torch.no_grad():
            for node in self.order:
                nid = int(node["id"])
                entry = weights_doc.get(str(nid))
                if entry is None:
                    continue
                learnable = {k: torch.tensor(v, dtype=torch.float64) for k, v in entry["learnable"].items()}
                stats = {k: torch.tensor(v, dtype=torch.float64) for k, v in entry["stats"].items()}
                op = node["op"]
                if op == "conv2d":
                    module = self.node_modules[str(nid)]
                    module.weight.copy_(learnable["weight"])
                elif op == "batchnorm":
                    module = self.node_modules[str(nid)]
                    module.weight.copy_(learnable["gamma"])
                    module.bias.copy_(learnable["beta"])
                    module.running_mean.copy_(stats["mean"])
                    module.running_var.copy_(stats["var"])
                elif op == "mhsa":
                    module = self.node_modules[str(nid)]
                    for name, proj in (
                        ("w_q", module.q_proj),
                        ("w_k", module.k_proj),
                        ("w_v", module.v_proj),
                        ("w_a", module.out_proj),
                    ):
                        proj.weight.copy_(learnable[name].T.unsqueeze(-1).unsqueeze(-1))
                elif op == "feedforward":
                    module = self.node_modules[str(nid)]
                    module.expand.weight.copy_(learnable["w_1"].T.unsqueeze(-1).unsqueeze(-1))
                    module.out_proj.weight.copy_(learnable["w_2"].T.unsqueeze(-1).unsqueeze(-1))
                elif op == "linear":
                    module = self.node_modules[str(nid)]
                    module.weight.copy_(learnable["weight"].T)
                    module.bias.copy_(learnable["bias"])

    def fold_batchnorms(self) -> None:
        """Fold every eval-mode BN into the convolution producing its input.

        Works because each BN in these graphs follows either a conv2d node
        or a fused attention/feed-forward module whose last op is a 1x1
        convolution.  BN modules become identities afterwards.
        """
        self.eval()
        producers = {int(n["id"]): n for n in self.order}
        for node in self.order:
            if node["op"] != "batchnorm":
                continue
            bn = self.node_modules[str(node["id"])]
            if isinstance(bn, nn.Identity):
                continue
            src = producers[int(node["inputs"][0])]
            if src["op"] == "conv2d":
                conv = self.node_modules[str(src["id"])]
            elif src["op"] == "mhsa":
                conv = self.node_modules[str(src["id"])].out_proj
            elif src["op"] == "feedforward":
                conv = self.node_modules[str(src["id"])].out_proj
            else:
                raise BuildError(
                    f"batchnorm node {node['id']} follows {src['op']}, cannot fold"
                )
            fused = torch.nn.utils.fusion.fuse_conv_bn_eval(conv, bn)
            if src["op"] == "conv2d":
                self.node_modules[str(src["id"])] = fused
            else:
                self.node_modules[str(src["id"])].out_proj = fused
            self.node_modules[str(node["id"])] = nn.Identity()


def build_model(graph_doc: dict) -> GraphNet:
    """Construct a trainable module mirror of a graph-JSON document."""
    if "nodes" not in graph_doc or "output_id" not in graph_doc:
        raise BuildError("graph JSON must carry 'nodes' and 'output_id'")
    return GraphNet(graph_doc)

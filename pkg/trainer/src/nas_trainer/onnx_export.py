"""Dependency-free ONNX export of trained models, plus a reload evaluator.

Serialization is hand-rolled protobuf (the deployment toolchain imposes
ONNX; this environment carries no onnx runtime, so the writer emits the
wire format directly and the result is validated with torch's vendored
ONNX checker).  Attention exports as elementary Conv / MatMul / ReLU /
Softmax ops with the batch-norm layers folded into their preceding
convolutions; the linear-attention variant contains no Softmax node at
all.

The module also ships a reader plus a small numpy evaluator so exported
files can be reloaded and checked against the live torch model.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np
import torch

from nas_trainer.model import GraphNet

IR_VERSION = 8
OPSET_VERSION = 13
PRODUCER = "nas-trainer"

FLOAT = 1
INT64 = 7

# AttributeProto.AttributeType
ATTR_FLOAT = 1
ATTR_INT = 2
ATTR_TENSOR = 4
ATTR_INTS = 7


class ExportError(Exception):
    pass


# ---------------------------------------------------------------------------
# protobuf wire-format primitives
# ---------------------------------------------------------------------------


def _varint(n: int) -> bytes:
    if n < 0:  # int64 fields carry negatives as two's complement
        n += 1 << 64
    out = bytearray()
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _tag(field: int, wire: int) -> bytes:
    return _varint((field << 3) | wire)


def _ld(field: int, payload: bytes) -> bytes:
    return _tag(field, 2) + _varint(len(payload)) + payload


def _vint(field: int, value: int) -> bytes:
    return _tag(field, 0) + _varint(value)


def _f32(field: int, value: float) -> bytes:
    return _tag(field, 5) + struct.pack("<f", value)


def _s(field: int, text: str) -> bytes:
    return _ld(field, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# ONNX message builders
# ---------------------------------------------------------------------------


def _tensor(name: str, array: np.ndarray) -> bytes:
    if array.dtype == np.int64:
        data_type = INT64
    else:
        array = array.astype(np.float32)
        data_type = FLOAT
    out = b"".join(_vint(1, int(d)) for d in array.shape)
    out += _vint(2, data_type)
    out += _s(8, name)
    out += _ld(9, array.tobytes())
    return out


def _attr_int(name: str, value: int) -> bytes:
    return _ld(5, _s(1, name) + _vint(3, value) + _vint(20, ATTR_INT))


def _attr_ints(name: str, values) -> bytes:
    body = _s(1, name) + b"".join(_vint(8, int(v)) for v in values) + _vint(20, ATTR_INTS)
    return _ld(5, body)


def _attr_float(name: str, value: float) -> bytes:
    return _ld(5, _s(1, name) + _f32(2, value) + _vint(20, ATTR_FLOAT))


def _node(op_type: str, inputs, outputs, name: str, attrs: bytes = b"") -> bytes:
    body = b"".join(_s(1, i) for i in inputs)
    body += b"".join(_s(2, o) for o in outputs)
    body += _s(3, name) + _s(4, op_type) + attrs
    return _ld(1, body)


def _value_info(name: str, dims) -> bytes:
    shape = b"".join(_ld(1, _vint(1, int(d))) for d in dims)
    tensor_type = _vint(1, FLOAT) + _ld(2, shape)
    return _s(1, name) + _ld(2, _ld(1, tensor_type))


def _model(graph_body: bytes) -> bytes:
    return (
        _vint(1, IR_VERSION)
        + _s(2, PRODUCER)
        + _ld(7, graph_body)
        + _ld(8, _s(1, "") + _vint(2, OPSET_VERSION))
    )


# ---------------------------------------------------------------------------
# graph export
# ---------------------------------------------------------------------------


class _GraphWriter:
    def __init__(self):
        self.nodes: list[bytes] = []
        self.initializers: list[bytes] = []
        self._names: set[str] = set()

    def init_tensor(self, name: str, array: np.ndarray) -> str:
        self.initializers.append(_ld(5, _tensor(name, np.ascontiguousarray(array))))
        return name

    def emit(self, op_type: str, inputs, outputs, name: str, attrs: bytes = b"") -> str:
        if name in self._names:
            raise ExportError(f"duplicate node name {name}")
        self._names.add(name)
        self.nodes.append(_node(op_type, inputs, outputs, name, attrs))
        return outputs[0]


def _conv_attrs(kernel: int, stride: int, padding: int, groups: int) -> bytes:
    return (
        _attr_ints("kernel_shape", [kernel, kernel])
        + _attr_ints("strides", [stride, stride])
        + _attr_ints("pads", [padding, padding, padding, padding])
        + _attr_ints("dilations", [1, 1])
        + _attr_int("group", groups)
    )


def _conv_weights(writer: _GraphWriter, prefix: str, conv: torch.nn.Conv2d):
    inputs = [writer.init_tensor(f"{prefix}_w", conv.weight.detach().numpy())]
    if conv.bias is not None:
        inputs.append(writer.init_tensor(f"{prefix}_b", conv.bias.detach().numpy()))
    return inputs


def _emit_conv(writer, x, prefix, conv: torch.nn.Conv2d):
    return writer.emit(
        "Conv",
        [x] + _conv_weights(writer, prefix, conv),
        [f"{prefix}_out"],
        prefix,
        _conv_attrs(conv.kernel_size[0], conv.stride[0], conv.padding[0], conv.groups),
    )


def _emit_mhsa(writer, x, prefix, module, shape):
    heads, d_head = module.heads, module.d_head
    qkv = heads * d_head
    _, h, w = shape
    n = h * w

    def heads_view(value, tag):
        shape_name = writer.init_tensor(
            f"{prefix}_{tag}_shape", np.array([1, heads, d_head, n], dtype=np.int64)
        )
        reshaped = writer.emit(
            "Reshape", [value, shape_name], [f"{prefix}_{tag}_r"], f"{prefix}_{tag}_reshape"
        )
        return writer.emit(
            "Transpose",
            [reshaped],
            [f"{prefix}_{tag}_t"],
            f"{prefix}_{tag}_transpose",
            _attr_ints("perm", [0, 1, 3, 2]),
        )

    q = _emit_conv(writer, x, f"{prefix}_q", module.q_proj)
    k = _emit_conv(writer, x, f"{prefix}_k", module.k_proj)
    v = _emit_conv(writer, x, f"{prefix}_v", module.v_proj)

    if module.attn_kind == "softmax":
        qt = heads_view(q, "q")  # (1, heads, N, d_head)
        k_shape = writer.init_tensor(
            f"{prefix}_k_shape", np.array([1, heads, d_head, n], dtype=np.int64)
        )
        k_r = writer.emit("Reshape", [k, k_shape], [f"{prefix}_k_r"], f"{prefix}_k_reshape")
        vt = heads_view(v, "v")
        scores = writer.emit(
            "MatMul", [qt, k_r], [f"{prefix}_scores"], f"{prefix}_scores_matmul"
        )
        scale = writer.init_tensor(
            f"{prefix}_scale", np.array(1.0 / math.sqrt(d_head), dtype=np.float32)
        )
        scaled = writer.emit("Mul", [scores, scale], [f"{prefix}_scaled"], f"{prefix}_scale_mul")
        probs = writer.emit(
            "Softmax", [scaled], [f"{prefix}_probs"], f"{prefix}_softmax", _attr_int("axis", 3)
        )
        ctx = writer.emit("MatMul", [probs, vt], [f"{prefix}_ctx"], f"{prefix}_ctx_matmul")
    else:
        q = writer.emit("Relu", [q], [f"{prefix}_q_relu"], f"{prefix}_q_relu_op")
        k = writer.emit("Relu", [k], [f"{prefix}_k_relu"], f"{prefix}_k_relu_op")
        qt = heads_view(q, "q")
        k_shape = writer.init_tensor(
            f"{prefix}_k_shape", np.array([1, heads, d_head, n], dtype=np.int64)
        )
        k_r = writer.emit("Reshape", [k, k_shape], [f"{prefix}_k_r"], f"{prefix}_k_reshape")
        vt = heads_view(v, "v")
        kv = writer.emit("MatMul", [k_r, vt], [f"{prefix}_kv"], f"{prefix}_kv_matmul")
        ctx = writer.emit("MatMul", [qt, kv], [f"{prefix}_ctx"], f"{prefix}_ctx_matmul")

    ctx_t = writer.emit(
        "Transpose",
        [ctx],
        [f"{prefix}_ctx_t"],
        f"{prefix}_ctx_transpose",
        _attr_ints("perm", [0, 1, 3, 2]),
    )
    map_shape = writer.init_tensor(
        f"{prefix}_map_shape", np.array([1, qkv, h, w], dtype=np.int64)
    )
    merged = writer.emit(
        "Reshape", [ctx_t, map_shape], [f"{prefix}_merged"], f"{prefix}_merge_reshape"
    )
    return _emit_conv(writer, merged, f"{prefix}_out_proj", module.out_proj)


def export_onnx(model: GraphNet, validate: bool = True) -> bytes:
    """Serialize an eval-mode model with BN folded; returns ONNX bytes."""
    model.fold_batchnorms()
    writer = _GraphWriter()
    names: dict[int, str] = {}

    input_node = next(n for n in model.order if n["op"] == "input")
    if input_node.get("shape") is None:
        raise ExportError("graph JSON carries no input shape")
    in_shape = tuple(input_node["shape"])

    for node in model.order:
        nid = int(node["id"])
        op = node["op"]
        prefix = f"n{nid}_{op}"
        module = model.node_modules[str(nid)] if str(nid) in model.node_modules else None
        if op == "input":
            names[nid] = "x"
            continue
        x = names[int(node["inputs"][0])] if node["inputs"] else None
        if op == "conv2d":
            names[nid] = _emit_conv(writer, x, prefix, module)
        elif op == "batchnorm":
            if not isinstance(module, torch.nn.Identity):
                raise ExportError(f"unfolded batchnorm at node {nid}")
            names[nid] = x
        elif op == "relu":
            names[nid] = writer.emit("Relu", [x], [f"{prefix}_out"], prefix)
        elif op in ("maxpool", "avgpool"):
            onnx_op = "MaxPool" if op == "maxpool" else "AveragePool"
            attrs = _attr_ints("kernel_shape", [node["params"]["kernel"]] * 2) + _attr_ints(
                "strides", [node["params"]["stride"]] * 2
            )
            names[nid] = writer.emit(onnx_op, [x], [f"{prefix}_out"], prefix, attrs)
        elif op == "combinedpool":
            attrs = _attr_ints("kernel_shape", [node["params"]["kernel"]] * 2) + _attr_ints(
                "strides", [node["params"]["stride"]] * 2
            )
            mx = writer.emit("MaxPool", [x], [f"{prefix}_max"], f"{prefix}_max_op", attrs)
            av = writer.emit("AveragePool", [x], [f"{prefix}_avg"], f"{prefix}_avg_op", attrs)
            total = writer.emit("Add", [mx, av], [f"{prefix}_sum"], f"{prefix}_add_op")
            half = writer.init_tensor(f"{prefix}_half", np.array(0.5, dtype=np.float32))
            names[nid] = writer.emit("Mul", [total, half], [f"{prefix}_out"], f"{prefix}_mul_op")
        elif op == "add":
            a, b = (names[int(i)] for i in node["inputs"])
            names[nid] = writer.emit("Add", [a, b], [f"{prefix}_out"], prefix)
        elif op == "mhsa":
            shape = node.get("shape")
            if shape is None:
                raise ExportError(f"mhsa node {nid} carries no shape")
            names[nid] = _emit_mhsa(writer, x, prefix, module, tuple(shape))
        elif op == "feedforward":
            hidden = _emit_conv(writer, x, f"{prefix}_expand", module.expand)
            hidden = writer.emit("Relu", [hidden], [f"{prefix}_relu"], f"{prefix}_relu_op")
            names[nid] = _emit_conv(writer, hidden, f"{prefix}_out_proj", module.out_proj)
        elif op == "globalavgpool":
            pooled = writer.emit("GlobalAveragePool", [x], [f"{prefix}_gap"], f"{prefix}_gap_op")
            names[nid] = writer.emit(
                "Flatten", [pooled], [f"{prefix}_out"], f"{prefix}_flatten", _attr_int("axis", 1)
            )
        elif op == "linear":
            inputs = [
                x,
                writer.init_tensor(f"{prefix}_w", module.weight.detach().numpy()),
                writer.init_tensor(f"{prefix}_b", module.bias.detach().numpy()),
            ]
            attrs = _attr_float("alpha", 1.0) + _attr_float("beta", 1.0) + _attr_int("transB", 1)
            names[nid] = writer.emit("Gemm", inputs, [f"{prefix}_out"], prefix, attrs)
        else:
            raise ExportError(f"op {op!r} has no ONNX lowering")

    output_name = names[int(model.doc["output_id"])]
    num_classes = next(
        n["params"]["out_dim"] for n in model.order if n["op"] == "linear"
    )
    graph_body = b"".join(writer.nodes)
    graph_body += _s(2, "hybrid_cnn_vit")
    graph_body += b"".join(writer.initializers)
    graph_body += _ld(11, _value_info("x", (1,) + in_shape))
    graph_body += _ld(12, _value_info(output_name, (1, num_classes)))
    payload = _model(graph_body)

    if validate:
        check_with_torch(payload)
    return payload


def check_with_torch(payload: bytes) -> None:
    """Run torch's vendored ONNX proto checker over the serialized bytes."""
    torch._C._check_onnx_proto(payload)


def write_onnx(model: GraphNet, path: str | Path, validate: bool = True) -> None:
    Path(path).write_bytes(export_onnx(model, validate=validate))


# ---------------------------------------------------------------------------
# reader + numpy evaluator (reload oracle)
# ---------------------------------------------------------------------------


def _scan(payload: bytes):
    """Yield (field, wire, value) triples of one protobuf message."""
    pos = 0
    while pos < len(payload):
        key = 0
        shift = 0
        while True:
            byte = payload[pos]
            pos += 1
            key |= (byte & 0x7F) << shift
            if not byte & 0x80:
                break
            shift += 7
        field, wire = key >> 3, key & 0x7
        if wire == 0:
            value = 0
            shift = 0
            while True:
                byte = payload[pos]
                pos += 1
                value |= (byte & 0x7F) << shift
                if not byte & 0x80:
                    break
                shift += 7
            yield field, wire, value
        elif wire == 2:
            length = 0
            shift = 0
            while True:
                byte = payload[pos]
                pos += 1
                length |= (byte & 0x7F) << shift
                if not byte & 0x80:
                    break
                shift += 7
            yield field, wire, payload[pos : pos + length]
            pos += length
        elif wire == 5:
            yield field, wire, payload[pos : pos + 4]
            pos += 4
        else:
            raise ExportError(f"unsupported wire type {wire}")


def _parse_tensor(payload: bytes) -> tuple[str, np.ndarray]:
    dims, data_type, name, raw = [], FLOAT, "", b""
    float_data = []
    for field, wire, value in _scan(payload):
        if field == 1:
            dims.append(value)
        elif field == 2:
            data_type = value
        elif field == 8:
            name = value.decode("utf-8")
        elif field == 9:
            raw = value
        elif field == 4 and wire == 2:  # packed float_data
            float_data.extend(struct.unpack(f"<{len(value)//4}f", value))
    if raw:
        dtype = np.float32 if data_type == FLOAT else np.int64
        array = np.frombuffer(raw, dtype=dtype).reshape(dims or (-1,))
    else:
        array = np.array(float_data, dtype=np.float32).reshape(dims or (-1,))
    return name, array


def _parse_attr(payload: bytes) -> tuple[str, object]:
    name, ints, value = "", [], None
    for field, wire, data in _scan(payload):
        if field == 1:
            name = data.decode("utf-8")
        elif field == 2:
            value = struct.unpack("<f", data)[0]
        elif field == 3:
            value = _to_signed(data)
        elif field == 8:
            if wire == 0:
                ints.append(_to_signed(data))
            else:  # packed
                pos = 0
                while pos < len(data):
                    v = 0
                    shift = 0
                    while True:
                        byte = data[pos]
                        pos += 1
                        v |= (byte & 0x7F) << shift
                        if not byte & 0x80:
                            break
                        shift += 7
                    ints.append(_to_signed(v))
    return name, (ints if ints else value)


def _to_signed(v: int) -> int:
    # int64 varints are two's complement; fold >2^63 back to negative
    return v - (1 << 64) if v >= (1 << 63) else v


def _parse_node(payload: bytes) -> dict:
    node = {"inputs": [], "outputs": [], "op": "", "attrs": {}, "name": ""}
    for field, wire, value in _scan(payload):
        if field == 1:
            node["inputs"].append(value.decode("utf-8"))
        elif field == 2:
            node["outputs"].append(value.decode("utf-8"))
        elif field == 3:
            node["name"] = value.decode("utf-8")
        elif field == 4:
            node["op"] = value.decode("utf-8")
        elif field == 5:
            key, attr = _parse_attr(value)
            node["attrs"][key] = attr
    return node


def read_onnx(payload: bytes) -> dict:
    """Parse ModelProto bytes into {nodes, initializers, input, output}."""
    graph = None
    for field, wire, value in _scan(payload):
        if field == 7:
            graph = value
    if graph is None:
        raise ExportError("no graph in model payload")
    doc = {"nodes": [], "initializers": {}, "inputs": [], "outputs": []}
    for field, wire, value in _scan(graph):
        if field == 1:
            doc["nodes"].append(_parse_node(value))
        elif field == 5:
            name, array = _parse_tensor(value)
            doc["initializers"][name] = array
        elif field == 11:
            doc["inputs"].append(_parse_value_info_name(value))
        elif field == 12:
            doc["outputs"].append(_parse_value_info_name(value))
    return doc


def _parse_value_info_name(payload: bytes) -> str:
    for field, wire, value in _scan(payload):
        if field == 1:
            return value.decode("utf-8")
    return ""


def _np_conv(x, w, b, stride, pads, group):
    batch, in_ch, h, wdt = x.shape
    out_ch, in_per_group, k, _ = w.shape
    p = pads[0]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    from numpy.lib.stride_tricks import sliding_window_view

    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out_per_group = out_ch // group
    outs = []
    for g in range(group):
        win = windows[:, g * in_per_group : (g + 1) * in_per_group]
        wg = w[g * out_per_group : (g + 1) * out_per_group]
        outs.append(np.einsum("bihwkl,oikl->bohw", win, wg))
    y = np.concatenate(outs, axis=1)
    if b is not None:
        y = y + b[None, :, None, None]
    return y


def _np_pool(x, kind, kernel, stride):
    from numpy.lib.stride_tricks import sliding_window_view

    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    if kind == "max":
        return windows.max(axis=(-2, -1))
    return windows.mean(axis=(-2, -1))


def evaluate_onnx(doc: dict, x: np.ndarray) -> np.ndarray:
    """Run a parsed model on one input; supports the ops this exporter emits."""
    values = dict(doc["initializers"])
    values[doc["inputs"][0]] = x.astype(np.float32)
    for node in doc["nodes"]:
        ins = [values[name] for name in node["inputs"]]
        op = node["op"]
        attrs = node["attrs"]
        if op == "Conv":
            w = ins[1]
            b = ins[2] if len(ins) > 2 else None
            out = _np_conv(
                ins[0], w, b, attrs["strides"][0], attrs.get("pads", [0, 0, 0, 0]),
                attrs.get("group", 1),
            )
        elif op == "Relu":
            out = np.maximum(ins[0], 0.0)
        elif op == "MaxPool":
            out = _np_pool(ins[0], "max", attrs["kernel_shape"][0], attrs["strides"][0])
        elif op == "AveragePool":
            out = _np_pool(ins[0], "avg", attrs["kernel_shape"][0], attrs["strides"][0])
        elif op == "Add":
            out = ins[0] + ins[1]
        elif op == "Mul":
            out = ins[0] * ins[1]
        elif op == "MatMul":
            out = ins[0] @ ins[1]
        elif op == "Softmax":
            shifted = ins[0] - ins[0].max(axis=-1, keepdims=True)
            exp = np.exp(shifted)
            out = exp / exp.sum(axis=-1, keepdims=True)
        elif op == "Transpose":
            out = np.transpose(ins[0], attrs["perm"])
        elif op == "Reshape":
            out = ins[0].reshape([int(v) for v in ins[1]])
        elif op == "GlobalAveragePool":
            out = ins[0].mean(axis=(2, 3), keepdims=True)
        elif op == "Flatten":
            out = ins[0].reshape(ins[0].shape[0], -1)
        elif op == "Gemm":
            w = ins[1].T if attrs.get("transB") else ins[1]
            out = ins[0] @ w + ins[2]
        else:
            raise ExportError(f"evaluator does not support op {op!r}")
        values[node["outputs"][0]] = out
    return values[doc["outputs"][0]]


# ---------------------------------------------------------------------------
# retrain + export entry point
# ---------------------------------------------------------------------------


def retrain_and_export(graph_doc: dict, config, out_dir: str | Path) -> dict:
    """Full training run, then ONNX + metrics files in `out_dir`.

    Returns the metrics dict {"test_accuracy", "params"}.
    """
    from nas_trainer.train import evaluate_accuracy, evaluate_architecture, load_dataset

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded = load_dataset(config, with_test=True)
    model, _ = evaluate_architecture(graph_doc, loaded, config)
    params = model.parameter_count()
    test_accuracy = evaluate_accuracy(model, loaded.test_images, loaded.test_labels)

    write_onnx(model, out_dir / "model.onnx")
    metrics = {"test_accuracy": test_accuracy, "params": params}
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2)
        fh.write("\n")
    return metrics

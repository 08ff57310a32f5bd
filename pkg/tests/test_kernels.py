import numpy as np
import pytest

from oracles import (
    feedforward_macs,
    linear_mhsa_macs,
    naive_conv2d,
    softmax_mhsa_macs,
)

from hybridnas import graph as gi
from hybridnas import kernels as kn
from hybridnas import space as sp
from hybridnas.errors import KernelError


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv_mac_count_matches_seven_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 32, 32))
    w = rng.normal(size=(16, 3, 3, 3))
    counter = kn.OpCounter()
    y = kn.conv2d(x, w, stride=1, padding=1, groups=1, counter=counter, node_id=0)
    y_ref, multiplies = naive_conv2d(x, w, stride=1, padding=1, groups=1)
    assert multiplies == 442_368
    assert counter.per_node[0] == 442_368
    np.testing.assert_allclose(y, y_ref, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize(
    "in_ch,out_ch,k,stride,padding,groups,size",
    [
        (4, 6, 3, 1, 1, 2, 9),
        (6, 6, 5, 2, 2, 3, 11),
        (8, 8, 3, 2, 1, 8, 8),
        (3, 5, 1, 1, 0, 1, 7),
    ],
)
def test_conv_against_naive_oracle(in_ch, out_ch, k, stride, padding, groups, size):
    rng = np.random.default_rng(in_ch * out_ch + k)
    x = rng.normal(size=(in_ch, size, size))
    w = rng.normal(size=(out_ch, in_ch // groups, k, k))
    counter = kn.OpCounter()
    y = kn.conv2d(x, w, stride=stride, padding=padding, groups=groups, counter=counter, node_id=1)
    y_ref, multiplies = naive_conv2d(x, w, stride=stride, padding=padding, groups=groups)
    np.testing.assert_allclose(y, y_ref, rtol=1e-9, atol=1e-9)
    assert counter.per_node[1] == multiplies


def test_identity_1x1_conv():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 5, 5))
    w = np.eye(8).reshape(8, 8, 1, 1)
    y = kn.conv2d(x, w, stride=1, padding=0, groups=1)
    np.testing.assert_array_equal(y, x)


def test_depthwise_equals_stacked_per_channel_convs():
    rng = np.random.default_rng(2)
    c = 16
    x = rng.normal(size=(c, 10, 10))
    w = rng.normal(size=(c, 1, 3, 3))
    y = kn.conv2d(x, w, stride=1, padding=1, groups=c)
    for ch in range(c):
        single = kn.conv2d(
            x[ch : ch + 1], w[ch : ch + 1], stride=1, padding=1, groups=1
        )
        np.testing.assert_array_equal(y[ch], single[0])


def test_conv_shape_mismatch_raises():
    x = np.zeros((6, 8, 8))
    w = np.zeros((8, 2, 3, 3))
    with pytest.raises(KernelError):
        kn.conv2d(x, w, stride=1, padding=1, groups=1)  # expects 6 channels/group
    with pytest.raises(KernelError):
        kn.conv2d(x, w, stride=1, padding=1, groups=4)  # 6 % 4 != 0


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------


def test_batchnorm_identity_params():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6, 6))
    ones, zeros = np.ones(4), np.zeros(4)
    y = kn.batchnorm_eval(x, ones, zeros, zeros, ones, eps=0.0)
    np.testing.assert_allclose(y, x, rtol=1e-15)


def test_batchnorm_fold_equivalence():
    rng = np.random.default_rng(4)
    for trial in range(20):
        c_in, c_out = rng.integers(1, 8), rng.integers(1, 8)
        x = rng.normal(size=(c_in, 9, 9))
        w = rng.normal(size=(c_out, c_in, 3, 3))
        gamma = rng.uniform(0.5, 2.0, c_out)
        beta = rng.normal(size=c_out)
        mean = rng.normal(size=c_out)
        var = rng.uniform(0.1, 2.0, c_out)
        reference = kn.batchnorm_eval(
            kn.conv2d(x, w, stride=1, padding=1, groups=1), gamma, beta, mean, var
        )
        w_f, b_f = kn.fold_batchnorm(w, None, gamma, beta, mean, var)
        assert w_f.shape == w.shape
        folded = kn.conv2d(x, w_f, stride=1, padding=1, groups=1) + b_f[:, None, None]
        deviation = np.abs(folded - reference) / np.maximum(np.abs(reference), 1e-30)
        assert deviation.max() <= 1e-10


def test_batchnorm_rejects_nonpositive_variance():
    x = np.zeros((2, 3, 3))
    with pytest.raises(KernelError):
        kn.batchnorm_eval(x, np.ones(2), np.zeros(2), np.zeros(2), -np.ones(2), eps=0.0)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def test_pool_constant_input_fixed_point():
    x = np.full((3, 8, 8), 2.5)
    for kind in ("max", "avg", "combined"):
        y = kn.pool(x, kind, kernel=2, stride=2)
        np.testing.assert_array_equal(y, np.full((3, 4, 4), 2.5))


def test_pool_hand_arithmetic():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert kn.pool(x, "max", 2, 2)[0, 0, 0] == 4.0
    assert kn.pool(x, "avg", 2, 2)[0, 0, 0] == 2.5
    assert kn.pool(x, "combined", 2, 2)[0, 0, 0] == 3.25


def test_combined_pool_is_mean_of_max_and_avg():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 12, 12))
    for kernel, stride in ((2, 2), (4, 4), (2, 4), (3, 2)):
        combined = kn.pool(x, "combined", kernel, stride)
        mx = kn.pool(x, "max", kernel, stride)
        av = kn.pool(x, "avg", kernel, stride)
        np.testing.assert_array_equal(combined, 0.5 * mx + 0.5 * av)


def test_pool_window_exceeding_input_raises():
    with pytest.raises(KernelError):
        kn.pool(np.zeros((1, 3, 3)), "max", kernel=4, stride=4)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _attn_params(rng, d_model, qkv_dim):
    return (
        rng.normal(size=(d_model, qkv_dim)),
        rng.normal(size=(d_model, qkv_dim)),
        rng.normal(size=(d_model, qkv_dim)),
        rng.normal(size=(qkv_dim, d_model)),
    )


def test_softmax_mhsa_single_token():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 8))
    w_q, w_k, w_v, w_a = _attn_params(rng, 8, 8)
    y = kn.mhsa_softmax(x, w_q, w_k, w_v, w_a, heads=2)
    np.testing.assert_allclose(y, (x @ w_v) @ w_a, rtol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(24, 16))
    w_q, w_k, w_v, w_a = _attn_params(rng, 16, 32)
    _, attention = kn.mhsa_softmax(x, w_q, w_k, w_v, w_a, heads=4, return_attention=True)
    sums = attention.sum(axis=-1)
    assert np.abs(sums - 1.0).max() <= 1e-12


def test_softmax_mhsa_mac_count():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(64, 32))
    w_q, w_k, w_v, w_a = _attn_params(rng, 32, 32)
    counter = kn.OpCounter()
    kn.mhsa_softmax(x, w_q, w_k, w_v, w_a, heads=4, counter=counter, node_id=0)
    assert counter.per_node[0] == 524_288
    assert counter.per_node[0] == softmax_mhsa_macs(64, 32, 32, 4)


def test_linear_mhsa_association_orders_agree():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(16, 32))
    w_q, w_k, w_v, w_a = _attn_params(rng, 32, 32)
    heads = 4
    y = kn.mhsa_linear(x, w_q, w_k, w_v, w_a, heads)

    # (Q' K'^T) V evaluated directly, head by head
    d_head = 32 // heads
    pieces = []
    qp = np.maximum(x @ w_q, 0.0)
    kp = np.maximum(x @ w_k, 0.0)
    v = x @ w_v
    for h in range(heads):
        sl = slice(h * d_head, (h + 1) * d_head)
        pieces.append((qp[:, sl] @ kp[:, sl].T) @ v[:, sl])
    y_other = np.concatenate(pieces, axis=1) @ w_a
    deviation = np.abs(y - y_other) / np.maximum(np.abs(y_other), 1e-30)
    assert deviation.max() <= 1e-9


def test_linear_mhsa_zero_input_zero_output():
    rng = np.random.default_rng(10)
    w_q, w_k, w_v, w_a = _attn_params(rng, 16, 16)
    y = kn.mhsa_linear(np.zeros((12, 16)), w_q, w_k, w_v, w_a, heads=2)
    np.testing.assert_array_equal(y, np.zeros((12, 16)))


def test_linear_mhsa_mac_count_below_softmax():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(64, 32))
    w_q, w_k, w_v, w_a = _attn_params(rng, 32, 32)
    counter = kn.OpCounter()
    kn.mhsa_linear(x, w_q, w_k, w_v, w_a, heads=4, counter=counter, node_id=0)
    assert counter.per_node[0] == 294_912
    assert counter.per_node[0] == linear_mhsa_macs(64, 32, 32, 4)
    assert counter.per_node[0] < softmax_mhsa_macs(64, 32, 32, 4)


def test_mhsa_rejects_indivisible_heads():
    x = np.zeros((4, 8))
    w = np.zeros((8, 9))
    with pytest.raises(KernelError):
        kn.mhsa_softmax(x, w, w, w, w.T, heads=2)


# ---------------------------------------------------------------------------
# feed-forward and linear
# ---------------------------------------------------------------------------


def test_feedforward_zero_weights_zero_output():
    x = np.random.default_rng(12).normal(size=(10, 8))
    y = kn.feedforward(x, np.zeros((8, 32)), np.zeros((32, 8)))
    np.testing.assert_array_equal(y, np.zeros((10, 8)))


def test_feedforward_preserves_shape_and_macs():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(64, 32))
    w1 = rng.normal(size=(32, 128))
    w2 = rng.normal(size=(128, 32))
    counter = kn.OpCounter()
    y = kn.feedforward(x, w1, w2, counter=counter, node_id=3)
    assert y.shape == x.shape
    assert counter.per_node[3] == 524_288
    assert counter.per_node[3] == feedforward_macs(64, 32, 128)


def test_feedforward_formula():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(5, 4))
    w1 = rng.normal(size=(4, 7))
    w2 = rng.normal(size=(7, 4))
    np.testing.assert_allclose(
        kn.feedforward(x, w1, w2), np.maximum(x @ w1, 0.0) @ w2, rtol=1e-14
    )


# ---------------------------------------------------------------------------
# network forward
# ---------------------------------------------------------------------------


def _lowered(arch, config):
    return gi.infer_shapes(gi.lower(arch, config), config.input_shape)


def test_network_forward_minimal_arch(default_config):
    arch = sp.ArchitectureDescriptor(
        (
            sp.CNNBlockSpec("residual", 3, 2, 16, 1),
            sp.PoolingBlockSpec("combined", 2, 2),
            sp.HybridViTBlockSpec("vit", None, 2, 32, True, 64, "softmax"),
            sp.ClassifierSpec(10),
        )
    )
    graph = _lowered(arch, default_config)
    params = kn.init_params(graph, 1)
    x = np.random.default_rng(2).uniform(-1, 1, size=(3, 32, 32))
    logits = kn.network_forward(graph, params, x)
    assert logits.shape == (10,)
    assert np.all(np.isfinite(logits))


def test_network_forward_deterministic(default_config):
    arch = sp.ArchitectureDescriptor(
        (
            sp.CNNBlockSpec("inverted_bottleneck", 3, 2, 24, 1),
            sp.PoolingBlockSpec("avg", 2, 2),
            sp.HybridViTBlockSpec("vit", None, 4, 32, False, None, "linear"),
            sp.ClassifierSpec(10),
        )
    )
    graph = _lowered(arch, default_config)
    x = np.random.default_rng(3).uniform(-1, 1, size=(3, 32, 32))
    a = kn.network_forward(graph, kn.init_params(graph, 5), x)
    b = kn.network_forward(graph, kn.init_params(graph, 5), x)
    np.testing.assert_array_equal(a, b)


def test_counter_total_is_sum_of_nodes(default_config):
    arch = sp.ArchitectureDescriptor(
        (
            sp.CNNBlockSpec("bottleneck", 5, 2, 32, 1),
            sp.PoolingBlockSpec("max", 2, 2),
            sp.HybridViTBlockSpec(
                "pool_vit", sp.PoolingBlockSpec("max", 2, 2), 2, 16, True, 64, "linear"
            ),
            sp.ClassifierSpec(10),
        )
    )
    graph = _lowered(arch, default_config)
    counter = kn.OpCounter()
    x = np.random.default_rng(4).uniform(-1, 1, size=(3, 32, 32))
    kn.network_forward(graph, kn.init_params(graph, 6), x, counter)
    assert counter.total == sum(counter.per_node.values())
    assert counter.total > 0


def test_spatial_permutation_invariance_crafted_graph():
    # Only 1x1 convolution, attention (permutation-equivariant) and global
    # average pooling: permuting pixels must not change the logits.
    nodes = {
        0: gi.LayerNode(0, "input", {}, (), -1, shape=(3, 6, 6)),
        1: gi.LayerNode(
            1,
            "conv2d",
            {"kernel": 1, "stride": 1, "padding": 0, "groups": 1, "in_channels": 3, "out_channels": 8},
            (0,),
            0,
            shape=(8, 6, 6),
        ),
        2: gi.LayerNode(2, "relu", {}, (1,), 0, shape=(8, 6, 6)),
        3: gi.LayerNode(
            3,
            "mhsa",
            {"heads": 2, "d_model": 8, "qkv_dim": 16, "attn_kind": "softmax"},
            (2,),
            1,
            shape=(8, 6, 6),
        ),
        4: gi.LayerNode(4, "globalavgpool", {}, (3,), 2, shape=(8, 1, 1)),
        5: gi.LayerNode(5, "linear", {"in_dim": 8, "out_dim": 10}, (4,), 2, shape=(10, 1, 1)),
    }
    graph = gi.NetworkGraph(nodes=nodes, input_id=0, output_id=5)
    params = kn.init_params(graph, 7)
    rng = np.random.default_rng(8)
    x = rng.uniform(-1, 1, size=(3, 6, 6))

    logits = kn.network_forward(graph, params, x)
    perm = rng.permutation(36)
    x_perm = x.reshape(3, 36)[:, perm].reshape(3, 6, 6)
    logits_perm = kn.network_forward(graph, params, x_perm)
    np.testing.assert_allclose(logits_perm, logits, rtol=1e-10, atol=1e-12)


def test_token_view_roundtrip():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, 4, 3))
    tokens = kn.map_to_tokens(x)
    assert tokens.shape == (12, 5)
    np.testing.assert_array_equal(kn.tokens_to_map(tokens, x.shape), x)


def test_params_json_roundtrip(default_config, tmp_path):
    arch = sp.ArchitectureDescriptor(
        (
            sp.CNNBlockSpec("residual", 3, 1, 8, 1),
            sp.PoolingBlockSpec("max", 2, 2),
            sp.HybridViTBlockSpec("vit", None, 1, 16, False, None, "softmax"),
            sp.ClassifierSpec(10),
        )
    )
    graph = _lowered(arch, default_config)
    params = kn.init_params(graph, 11)
    loaded = kn.params_from_json(kn.params_to_json(params))
    for nid, p in params.items():
        for key, arr in p.learnable.items():
            np.testing.assert_array_equal(loaded[nid].learnable[key], arr)
        for key, arr in p.stats.items():
            np.testing.assert_array_equal(loaded[nid].stats[key], arr)

import numpy as np
import pytest

from hybridnas import space as sp
from hybridnas.errors import ConfigurationError, DecodeError, EncodeError


def test_singleton_space_has_unique_genome(singleton_config):
    g1 = sp.sample(singleton_config, seed=1)
    g2 = sp.sample(singleton_config, seed=999)
    assert g1 == g2
    assert all(g == 0 for g in g1.genes)


def test_sample_deterministic_for_seed(default_config):
    assert sp.sample(default_config, 42) == sp.sample(default_config, 42)
    assert sp.sample(default_config, 42) != sp.sample(default_config, 43)


def test_sample_uniform_frequencies():
    # Every domain binary: empirical per-gene choice frequency must sit
    # around 0.5 over 10k samples.
    config = sp.SearchSpaceConfig(
        cnn_depth=(1, 2),
        vit_depth=(1, 2),
        cnn_blocks=sp.CNNBlockDomains(
            kind=("residual", "bottleneck"),
            kernel_size=(3, 5),
            stride=(1, 2),
            out_channels=(8, 16),
            groups=(1, 2),
        ),
        pooling=sp.PoolingDomains(kind=("max", "avg"), kernel_size=(2, 4), stride=(2, 4)),
        vit_blocks=sp.ViTBlockDomains(
            kind=("vit", "pool_vit"),
            heads=(1, 2),
            qkv_dim=(16, 32),
            use_ff=(True, False),
            ff_dim=(32, 64),
            attn_kind=("softmax", "linear"),
        ),
    )
    rng = np.random.default_rng(7)
    n = 10_000
    counts = np.zeros(sp.genome_length(config))
    for _ in range(n):
        counts += np.array(sp.sample_genome(config, rng).genes)
    freqs = counts / n
    assert freqs.min() >= 0.45 and freqs.max() <= 0.55


def test_decode_minimal_depth(toy_config):
    genome = sp.Genome(tuple([0] * sp.genome_length(toy_config)))
    arch = sp.decode(genome, toy_config)
    kinds = [type(b).__name__ for b in arch.blocks]
    assert kinds == [
        "CNNBlockSpec",
        "PoolingBlockSpec",
        "HybridViTBlockSpec",
        "ClassifierSpec",
    ]


def test_decode_rejects_out_of_range_gene(toy_config):
    genes = [0] * sp.genome_length(toy_config)
    genes[0] = 5  # cnn_depth domain has one entry
    with pytest.raises(DecodeError):
        sp.decode(sp.Genome(tuple(genes)), toy_config)
    with pytest.raises(DecodeError):
        sp.decode(sp.Genome((0,)), toy_config)


def test_pool_vit_genome_decodes_to_pooling_prefix(default_config):
    sites = sp.gene_sites(default_config)
    genes = [0] * len(sites)
    names = [s.name for s in sites]
    kind_pos = names.index("vit0.kind")
    genes[kind_pos] = default_config.vit_blocks.kind.index("pool_vit")
    arch = sp.decode(sp.Genome(tuple(genes)), default_config)
    vit = arch.vit_blocks[0]
    assert vit.kind == "pool_vit"
    assert isinstance(vit.prefix, sp.PoolingBlockSpec)


def test_cnn_vit_genome_decodes_to_cnn_prefix(default_config):
    sites = sp.gene_sites(default_config)
    genes = [0] * len(sites)
    names = [s.name for s in sites]
    genes[names.index("vit0.kind")] = default_config.vit_blocks.kind.index("cnn_vit")
    arch = sp.decode(sp.Genome(tuple(genes)), default_config)
    assert isinstance(arch.vit_blocks[0].prefix, sp.CNNBlockSpec)


def test_roundtrip_on_random_genomes(default_config):
    # encode(decode(g)) preserves all active genes and zeroes inactive ones.
    rng = np.random.default_rng(11)
    for _ in range(1000):
        genome = sp.sample_genome(default_config, rng)
        arch = sp.decode(genome, default_config)
        back = sp.encode(arch, default_config)
        mask = sp.active_gene_mask(genome, default_config)
        for active, g_orig, g_back in zip(mask, genome.genes, back.genes):
            if active:
                assert g_orig == g_back
            else:
                assert g_back == 0
        assert sp.decode(back, default_config) == arch


def test_skeleton_order_always_preserved(default_config):
    # every decoded descriptor matches CNN+ Pool HybridViT+ Classifier
    rng = np.random.default_rng(23)
    for _ in range(300):
        arch = sp.decode(sp.sample_genome(default_config, rng), default_config)
        kinds = [type(b).__name__ for b in arch.blocks]
        n_cnn = kinds.index("PoolingBlockSpec")
        assert n_cnn >= 1
        assert all(k == "CNNBlockSpec" for k in kinds[:n_cnn])
        assert kinds[n_cnn] == "PoolingBlockSpec"
        assert all(k == "HybridViTBlockSpec" for k in kinds[n_cnn + 1 : -1])
        assert len(kinds) - n_cnn - 2 >= 1
        assert kinds[-1] == "ClassifierSpec"


def test_roundtrip_exhaustive_toy_space(toy_config):
    genomes = list(sp.iterate_genomes(toy_config))
    assert len(genomes) == 576
    assert len(set(genomes)) == len(genomes)
    for genome in genomes:
        arch = sp.decode(genome, toy_config)
        assert sp.encode(arch, toy_config) == genome
        assert sp.decode(sp.encode(arch, toy_config), toy_config) == arch


def test_encode_rejects_value_outside_domain(toy_config):
    arch = sp.decode(sp.Genome(tuple([0] * sp.genome_length(toy_config))), toy_config)
    blocks = list(arch.blocks)
    blocks[0] = sp.CNNBlockSpec(
        kind="residual", kernel_size=3, stride=1, out_channels=13, groups=1
    )
    with pytest.raises(EncodeError):
        sp.encode(sp.ArchitectureDescriptor(tuple(blocks)), toy_config)


def test_encode_singleton_space(singleton_config):
    genome = sp.sample(singleton_config, 0)
    arch = sp.decode(genome, singleton_config)
    assert sp.encode(arch, singleton_config) == genome


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def _config_with(cnn=None, vit=None, pooling=None, **kwargs):
    base = dict(
        cnn_depth=(1, 2),
        vit_depth=(1,),
        cnn_blocks=cnn
        or sp.CNNBlockDomains(
            kind=sp.CNN_KINDS,
            kernel_size=(3,),
            stride=(1, 2),
            out_channels=(6, 8, 16),
            groups=(1, 2, 4),
        ),
        pooling=pooling or sp.PoolingDomains(kind=("max",), kernel_size=(2,), stride=(2,)),
        vit_blocks=vit
        or sp.ViTBlockDomains(
            kind=("vit",),
            heads=(1,),
            qkv_dim=(16,),
            use_ff=(False,),
            ff_dim=(32,),
            attn_kind=("softmax",),
        ),
    )
    base.update(kwargs)
    return sp.SearchSpaceConfig(**base)


def test_validate_group_divisibility():
    config = _config_with()
    arch = sp.ArchitectureDescriptor(
        (
            sp.CNNBlockSpec("residual", 3, 1, 6, 1),
            sp.CNNBlockSpec("residual", 3, 1, 8, 4),  # in_channels 6, groups 4
            sp.PoolingBlockSpec("max", 2, 2),
            sp.HybridViTBlockSpec("vit", None, 1, 16, False, None, "softmax"),
            sp.ClassifierSpec(10),
        )
    )
    report = sp.validate(arch, config)
    assert not report.valid
    assert any(
        v.rule_id == sp.RULE_GROUP_DIVISIBILITY and v.block_index == 1
        for v in report.violations
    )


def test_validate_head_divisibility():
    config = _config_with(
        vit=sp.ViTBlockDomains(
            kind=("vit",),
            heads=(5,),
            qkv_dim=(32,),
            use_ff=(False,),
            ff_dim=(32,),
            attn_kind=("softmax",),
        )
    )
    arch = sp.ArchitectureDescriptor(
        (
            sp.CNNBlockSpec("residual", 3, 1, 8, 1),
            sp.PoolingBlockSpec("max", 2, 2),
            sp.HybridViTBlockSpec("vit", None, 5, 32, False, None, "softmax"),
            sp.ClassifierSpec(10),
        )
    )
    report = sp.validate(arch, config)
    assert any(v.rule_id == sp.RULE_HEAD_DIVISIBILITY for v in report.violations)


def test_validate_spatial_underflow_after_six_stride2_reductions():
    config = _config_with(cnn_depth=(6,))
    blocks = [sp.CNNBlockSpec("residual", 3, 2, 8, 1) for _ in range(6)]
    blocks += [
        sp.PoolingBlockSpec("max", 2, 2),
        sp.HybridViTBlockSpec("vit", None, 1, 16, False, None, "softmax"),
        sp.ClassifierSpec(10),
    ]
    report = sp.validate(sp.ArchitectureDescriptor(tuple(blocks)), config)
    assert any(v.rule_id == sp.RULE_SPATIAL_UNDERFLOW for v in report.violations)


def test_validate_ff_expansion():
    config = _config_with(
        vit=sp.ViTBlockDomains(
            kind=("vit",),
            heads=(1,),
            qkv_dim=(16,),
            use_ff=(True,),
            ff_dim=(4,),
            attn_kind=("softmax",),
        )
    )
    arch = sp.ArchitectureDescriptor(
        (
            sp.CNNBlockSpec("residual", 3, 1, 8, 1),
            sp.PoolingBlockSpec("max", 2, 2),
            sp.HybridViTBlockSpec("vit", None, 1, 16, True, 4, "softmax"),
            sp.ClassifierSpec(10),
        )
    )
    report = sp.validate(arch, config)
    assert any(v.rule_id == sp.RULE_FF_EXPANSION for v in report.violations)


def test_validation_report_consistency(default_config):
    rng = np.random.default_rng(3)
    for _ in range(50):
        genome = sp.sample_genome(default_config, rng)
        report = sp.validate(sp.decode(genome, default_config), default_config)
        assert report.valid == (len(report.violations) == 0)


def test_sampling_closure(default_config):
    # Every sample decodes; the measured validity rate of the stock config
    # sits around 0.43 (grouped-conv divisibility, FF expansion and spatial
    # underflow each reject a slice of uniform samples).
    rng = np.random.default_rng(123)
    n = 2000
    valid = 0
    for _ in range(n):
        genome = sp.sample_genome(default_config, rng)
        arch = sp.decode(genome, default_config)  # must never raise
        if sp.validate(arch, default_config).valid:
            valid += 1
    assert valid / n >= 0.35


# ---------------------------------------------------------------------------
# mutate
# ---------------------------------------------------------------------------


def test_mutate_singleton_space_stagnates(singleton_config):
    genome = sp.sample(singleton_config, 0)
    result = sp.mutate(genome, singleton_config, np.random.default_rng(0))
    assert result.stagnated
    assert result.genome == genome


def test_mutate_changes_exactly_one_gene(toy_config):
    rng = np.random.default_rng(5)
    parent = None
    while parent is None:
        candidate = sp.sample_genome(toy_config, rng)
        if sp.validate(sp.decode(candidate, toy_config), toy_config).valid:
            parent = candidate
    for _ in range(10_000):
        result = sp.mutate(parent, toy_config, rng)
        if result.stagnated:
            continue
        hamming = sum(a != b for a, b in zip(parent.genes, result.genome.genes))
        assert hamming == 1


def test_mutate_deterministic(toy_config):
    genome = sp.Genome(tuple([0] * sp.genome_length(toy_config)))
    r1 = sp.mutate(genome, toy_config, np.random.default_rng(99))
    r2 = sp.mutate(genome, toy_config, np.random.default_rng(99))
    assert r1 == r2


def test_mutated_children_always_validate(default_config):
    rng = np.random.default_rng(17)
    parent = None
    while parent is None:
        candidate = sp.sample_genome(default_config, rng)
        if sp.validate(sp.decode(candidate, default_config), default_config).valid:
            parent = candidate
    for _ in range(200):
        result = sp.mutate(parent, default_config, rng)
        assert sp.validate(sp.decode(result.genome, default_config), default_config).valid
        parent = result.genome


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def test_empty_domain_rejected():
    with pytest.raises(ConfigurationError):
        sp.CNNBlockDomains(kernel_size=())
    with pytest.raises(ConfigurationError):
        sp.SearchSpaceConfig(cnn_depth=())
    with pytest.raises(ConfigurationError):
        sp.SearchSpaceConfig(cnn_depth=(0, 1))
    with pytest.raises(ConfigurationError):
        sp.SearchSpaceConfig(input_shape=(3, 0, 32))


def test_space_json_roundtrip(default_config, tmp_path):
    path = tmp_path / "space.json"
    sp.save_space(default_config, path)
    loaded = sp.load_space(path)
    assert loaded == default_config


def test_space_json_rejects_unknown_keys():
    doc = sp.space_to_json(sp.default_space())
    doc["cnn_stage"]["bogus"] = [1]
    with pytest.raises(ConfigurationError):
        sp.space_from_json(doc)


def test_genome_json_roundtrip(default_config):
    genome = sp.sample(default_config, 8)
    assert sp.Genome.from_json(genome.to_json()) == genome

"""Hybrid CNN-ViT search space: domains, genomes, sampling, mutation.

An architecture follows a fixed macro skeleton: a stage of CNN blocks, one
mandatory pooling block, a stage of hybrid ViT blocks, and a classifier.
Every block carries its own independently searchable parameters.

Genomes are fixed-length index vectors over the per-parameter choice
domains.  Slots beyond the active stage depths stay in the vector but are
masked by the two depth genes, so mutation is well defined across depth
changes.  Inactive genes are canonically zero when produced by ``encode``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

from hybridnas.errors import (
    ConfigurationError,
    DecodeError,
    EncodeError,
    ShapeUnderflowError,
)

CNN_KINDS = ("residual", "bottleneck", "inverted_bottleneck")
POOL_KINDS = ("max", "avg", "combined")
HYBRID_KINDS = ("vit", "cnn_vit", "pool_vit")
ATTN_KINDS = ("softmax", "linear")

# How many attempts mutate() makes before giving up and flagging stagnation.
MUTATION_RETRIES = 100


# ---------------------------------------------------------------------------
# Block specs (the decoded, concrete form)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CNNBlockSpec:
    """One concrete CNN block."""

    kind: str
    kernel_size: int
    stride: int
    out_channels: int
    groups: int


@dataclass(frozen=True)
class PoolingBlockSpec:
    """One concrete pooling block."""

    kind: str
    kernel_size: int
    stride: int


@dataclass(frozen=True)
class HybridViTBlockSpec:
    """One concrete hybrid ViT block: optional prefix block + attention encoder."""

    kind: str  # "vit" | "cnn_vit" | "pool_vit"
    prefix: Union[CNNBlockSpec, PoolingBlockSpec, None]
    heads: int
    qkv_dim: int
    use_ff: bool
    ff_dim: int | None
    attn_kind: str


@dataclass(frozen=True)
class ClassifierSpec:
    """Global average pooling followed by a linear layer. Not searchable."""

    num_classes: int


BlockSpec = Union[CNNBlockSpec, PoolingBlockSpec, HybridViTBlockSpec, ClassifierSpec]


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Ordered block list: CNN+ Pool HybridViT+ Classifier."""

    blocks: tuple[BlockSpec, ...]

    @property
    def cnn_blocks(self) -> tuple[CNNBlockSpec, ...]:
        return tuple(b for b in self.blocks if isinstance(b, CNNBlockSpec))

    @property
    def vit_blocks(self) -> tuple[HybridViTBlockSpec, ...]:
        return tuple(b for b in self.blocks if isinstance(b, HybridViTBlockSpec))

    @property
    def depth(self) -> int:
        """Total block count, classifier included."""
        return len(self.blocks)


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


def _check_domain(name: str, values: Sequence, allowed: Sequence | None = None) -> tuple:
    values = tuple(values)
    if not values:
        raise ConfigurationError(f"domain '{name}' is empty")
    if len(set(values)) != len(values):
        raise ConfigurationError(f"domain '{name}' has duplicate values: {values}")
    if allowed is not None:
        bad = [v for v in values if v not in allowed]
        if bad:
            raise ConfigurationError(f"domain '{name}' has unknown values: {bad}")
    return values


@dataclass(frozen=True)
class CNNBlockDomains:
    """Choice sets for one CNN block slot."""

    kind: tuple[str, ...] = CNN_KINDS
    kernel_size: tuple[int, ...] = (3, 5)
    stride: tuple[int, ...] = (1, 2)
    out_channels: tuple[int, ...] = (8, 16, 24, 32, 48, 64, 96, 128)
    groups: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        object.__setattr__(self, "kind", _check_domain("cnn.kind", self.kind, CNN_KINDS))
        for f in ("kernel_size", "stride", "out_channels", "groups"):
            vals = _check_domain(f"cnn.{f}", getattr(self, f))
            if any(int(v) < 1 for v in vals):
                raise ConfigurationError(f"domain 'cnn.{f}' must be >= 1: {vals}")
            object.__setattr__(self, f, tuple(int(v) for v in vals))


@dataclass(frozen=True)
class PoolingDomains:
    """Choice sets for a pooling block (stage separator and Pool-ViT prefix)."""

    kind: tuple[str, ...] = POOL_KINDS
    kernel_size: tuple[int, ...] = (2, 4)
    stride: tuple[int, ...] = (2, 4)

    def __post_init__(self):
        object.__setattr__(self, "kind", _check_domain("pool.kind", self.kind, POOL_KINDS))
        for f in ("kernel_size", "stride"):
            vals = _check_domain(f"pool.{f}", getattr(self, f))
            if any(int(v) < 1 for v in vals):
                raise ConfigurationError(f"domain 'pool.{f}' must be >= 1: {vals}")
            object.__setattr__(self, f, tuple(int(v) for v in vals))


@dataclass(frozen=True)
class ViTBlockDomains:
    """Choice sets for one hybrid ViT block slot."""

    kind: tuple[str, ...] = HYBRID_KINDS
    heads: tuple[int, ...] = (1, 2, 4)
    qkv_dim: tuple[int, ...] = (16, 32, 64)
    use_ff: tuple[bool, ...] = (True, False)
    ff_dim: tuple[int, ...] = (32, 64, 128, 256)
    attn_kind: tuple[str, ...] = ATTN_KINDS

    def __post_init__(self):
        object.__setattr__(self, "kind", _check_domain("vit.kind", self.kind, HYBRID_KINDS))
        object.__setattr__(
            self, "attn_kind", _check_domain("vit.attn_kind", self.attn_kind, ATTN_KINDS)
        )
        object.__setattr__(self, "use_ff", _check_domain("vit.use_ff", self.use_ff, (True, False)))
        for f in ("heads", "qkv_dim", "ff_dim"):
            vals = _check_domain(f"vit.{f}", getattr(self, f))
            if any(int(v) < 1 for v in vals):
                raise ConfigurationError(f"domain 'vit.{f}' must be >= 1: {vals}")
            object.__setattr__(self, f, tuple(int(v) for v in vals))


@dataclass(frozen=True)
class SearchSpaceConfig:
    """Declarative choice domains for every searchable parameter.

    The CNN-ViT prefix sub-blocks of hybrid ViT blocks reuse ``cnn_blocks``
    and ``pooling`` domains; the stage-separator pooling block shares the
    same ``pooling`` domains.
    """

    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10
    max_params: int = 100_000
    cnn_depth: tuple[int, ...] = (1, 2, 3, 4)
    vit_depth: tuple[int, ...] = (1, 2, 3, 4)
    cnn_blocks: CNNBlockDomains = field(default_factory=CNNBlockDomains)
    pooling: PoolingDomains = field(default_factory=PoolingDomains)
    vit_blocks: ViTBlockDomains = field(default_factory=ViTBlockDomains)

    def __post_init__(self):
        shape = tuple(int(v) for v in self.input_shape)
        if len(shape) != 3 or any(v < 1 for v in shape):
            raise ConfigurationError(f"bad input_shape {self.input_shape}")
        object.__setattr__(self, "input_shape", shape)
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if self.max_params < 1:
            raise ConfigurationError("max_params must be >= 1")
        for f in ("cnn_depth", "vit_depth"):
            vals = _check_domain(f, getattr(self, f))
            if any(int(v) < 1 for v in vals):
                raise ConfigurationError(f"depth domain '{f}' must be >= 1: {vals}")
            object.__setattr__(self, f, tuple(int(v) for v in sorted(vals)))

    @property
    def max_cnn_depth(self) -> int:
        return max(self.cnn_depth)

    @property
    def max_vit_depth(self) -> int:
        return max(self.vit_depth)


def default_space(**overrides) -> SearchSpaceConfig:
    """The stock CIFAR-10 configuration."""
    return SearchSpaceConfig(**overrides)


# ---------------------------------------------------------------------------
# Config (de)serialization -- documented JSON schema
# ---------------------------------------------------------------------------


def space_to_json(config: SearchSpaceConfig) -> dict:
    return {
        "input_shape": list(config.input_shape),
        "num_classes": config.num_classes,
        "max_params": config.max_params,
        "cnn_stage": {
            "depth": list(config.cnn_depth),
            "kind": list(config.cnn_blocks.kind),
            "kernel_size": list(config.cnn_blocks.kernel_size),
            "stride": list(config.cnn_blocks.stride),
            "out_channels": list(config.cnn_blocks.out_channels),
            "groups": list(config.cnn_blocks.groups),
        },
        "pooling": {
            "kind": list(config.pooling.kind),
            "kernel_size": list(config.pooling.kernel_size),
            "stride": list(config.pooling.stride),
        },
        "vit_stage": {
            "depth": list(config.vit_depth),
            "kind": list(config.vit_blocks.kind),
            "heads": list(config.vit_blocks.heads),
            "qkv_dim": list(config.vit_blocks.qkv_dim),
            "use_ff": list(config.vit_blocks.use_ff),
            "ff_dim": list(config.vit_blocks.ff_dim),
            "attn_kind": list(config.vit_blocks.attn_kind),
        },
    }


def _take(section: dict, section_name: str, cls, depth_key: bool):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in section.items():
        if key == "depth" and depth_key:
            continue
        if key not in known:
            raise ConfigurationError(f"unknown key '{key}' in section '{section_name}'")
        kwargs[key] = tuple(value)
    return cls(**kwargs)


def space_from_json(doc: dict) -> SearchSpaceConfig:
    try:
        cnn = dict(doc.get("cnn_stage", {}))
        pool = dict(doc.get("pooling", {}))
        vit = dict(doc.get("vit_stage", {}))
        kwargs = {}
        if "input_shape" in doc:
            kwargs["input_shape"] = tuple(doc["input_shape"])
        if "num_classes" in doc:
            kwargs["num_classes"] = int(doc["num_classes"])
        if "max_params" in doc:
            kwargs["max_params"] = int(doc["max_params"])
        if "depth" in cnn:
            kwargs["cnn_depth"] = tuple(cnn["depth"])
        if "depth" in vit:
            kwargs["vit_depth"] = tuple(vit["depth"])
        if cnn:
            kwargs["cnn_blocks"] = _take(cnn, "cnn_stage", CNNBlockDomains, depth_key=True)
        if pool:
            kwargs["pooling"] = _take(pool, "pooling", PoolingDomains, depth_key=False)
        if vit:
            kwargs["vit_blocks"] = _take(vit, "vit_stage", ViTBlockDomains, depth_key=True)
        return SearchSpaceConfig(**kwargs)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"malformed search-space document: {exc}") from exc


def load_space(path: str | Path) -> SearchSpaceConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return space_from_json(json.load(fh))


def save_space(config: SearchSpaceConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(space_to_json(config), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Genome layout
# ---------------------------------------------------------------------------

# Per-slot gene names, in vector order.
_CNN_GENES = ("kind", "kernel_size", "stride", "out_channels", "groups")
_POOL_GENES = ("kind", "kernel_size", "stride")
_VIT_GENES = ("kind", "heads", "qkv_dim", "use_ff", "ff_dim", "attn_kind")


@dataclass(frozen=True)
class GeneSite:
    """One position in the genome: a name and its choice domain."""

    name: str
    domain: tuple


def gene_sites(config: SearchSpaceConfig) -> tuple[GeneSite, ...]:
    """The genome layout: depth genes, CNN slots, pooling, ViT slots.

    Each hybrid ViT slot carries, besides its own six genes, a nested CNN
    prefix group and a nested pooling prefix group; only the group matching
    the slot's kind gene is active.
    """
    sites = [
        GeneSite("cnn_depth", config.cnn_depth),
        GeneSite("vit_depth", config.vit_depth),
    ]
    for i in range(config.max_cnn_depth):
        for g in _CNN_GENES:
            sites.append(GeneSite(f"cnn{i}.{g}", getattr(config.cnn_blocks, g)))
    for g in _POOL_GENES:
        sites.append(GeneSite(f"pool.{g}", getattr(config.pooling, g)))
    for i in range(config.max_vit_depth):
        for g in _VIT_GENES:
            sites.append(GeneSite(f"vit{i}.{g}", getattr(config.vit_blocks, g)))
        for g in _CNN_GENES:
            sites.append(GeneSite(f"vit{i}.prefix_cnn.{g}", getattr(config.cnn_blocks, g)))
        for g in _POOL_GENES:
            sites.append(GeneSite(f"vit{i}.prefix_pool.{g}", getattr(config.pooling, g)))
    return tuple(sites)


def genome_length(config: SearchSpaceConfig) -> int:
    return len(gene_sites(config))


@dataclass(frozen=True)
class Genome:
    """Fixed-length vector of choice indices."""

    genes: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.genes)

    def to_json(self) -> list[int]:
        return list(self.genes)

    @classmethod
    def from_json(cls, doc: Sequence[int]) -> "Genome":
        return cls(tuple(int(g) for g in doc))

    def replaced(self, position: int, value: int) -> "Genome":
        genes = list(self.genes)
        genes[position] = value
        return Genome(tuple(genes))


def _check_genome(genome: Genome, sites: tuple[GeneSite, ...]) -> None:
    if len(genome.genes) != len(sites):
        raise DecodeError(
            f"genome length {len(genome.genes)} != space genome length {len(sites)}"
        )
    for idx, (gene, site) in enumerate(zip(genome.genes, sites)):
        if not 0 <= gene < len(site.domain):
            raise DecodeError(
                f"gene {idx} ({site.name}) = {gene} outside domain of size {len(site.domain)}"
            )


class _GeneReader:
    """Sequential cursor over (genome, sites)."""

    def __init__(self, genome: Genome, sites: tuple[GeneSite, ...]):
        self.genes = genome.genes
        self.sites = sites
        self.pos = 0

    def take(self):
        site = self.sites[self.pos]
        value = site.domain[self.genes[self.pos]]
        self.pos += 1
        return value

    def skip(self, n: int) -> None:
        self.pos += n


# ---------------------------------------------------------------------------
# Sampling / decode / encode
# ---------------------------------------------------------------------------


def sample_genome(config: SearchSpaceConfig, rng: np.random.Generator) -> Genome:
    """Draw every gene uniformly from its domain."""
    sites = gene_sites(config)
    genes = tuple(int(rng.integers(0, len(site.domain))) for site in sites)
    return Genome(genes)


def sample(config: SearchSpaceConfig, seed: int) -> Genome:
    """Uniform random genome, deterministic for a fixed seed."""
    return sample_genome(config, np.random.default_rng(seed))


def decode(genome: Genome, config: SearchSpaceConfig) -> ArchitectureDescriptor:
    """Resolve a genome to a concrete block list; inactive slots are dropped."""
    sites = gene_sites(config)
    _check_genome(genome, sites)
    reader = _GeneReader(genome, sites)

    cnn_depth = reader.take()
    vit_depth = reader.take()

    blocks: list[BlockSpec] = []
    for i in range(config.max_cnn_depth):
        if i < cnn_depth:
            blocks.append(
                CNNBlockSpec(
                    kind=reader.take(),
                    kernel_size=reader.take(),
                    stride=reader.take(),
                    out_channels=reader.take(),
                    groups=reader.take(),
                )
            )
        else:
            reader.skip(len(_CNN_GENES))

    blocks.append(
        PoolingBlockSpec(kind=reader.take(), kernel_size=reader.take(), stride=reader.take())
    )

    for i in range(config.max_vit_depth):
        if i < vit_depth:
            kind = reader.take()
            heads = reader.take()
            qkv_dim = reader.take()
            use_ff = reader.take()
            ff_dim = reader.take()
            attn_kind = reader.take()
            if kind == "cnn_vit":
                prefix = CNNBlockSpec(
                    kind=reader.take(),
                    kernel_size=reader.take(),
                    stride=reader.take(),
                    out_channels=reader.take(),
                    groups=reader.take(),
                )
                reader.skip(len(_POOL_GENES))
            elif kind == "pool_vit":
                reader.skip(len(_CNN_GENES))
                prefix = PoolingBlockSpec(
                    kind=reader.take(), kernel_size=reader.take(), stride=reader.take()
                )
            else:
                prefix = None
                reader.skip(len(_CNN_GENES) + len(_POOL_GENES))
            blocks.append(
                HybridViTBlockSpec(
                    kind=kind,
                    prefix=prefix,
                    heads=heads,
                    qkv_dim=qkv_dim,
                    use_ff=use_ff,
                    ff_dim=ff_dim if use_ff else None,
                    attn_kind=attn_kind,
                )
            )
        else:
            reader.skip(len(_VIT_GENES) + len(_CNN_GENES) + len(_POOL_GENES))

    blocks.append(ClassifierSpec(num_classes=config.num_classes))
    return ArchitectureDescriptor(blocks=tuple(blocks))


def _index_of(domain: tuple, value, what: str) -> int:
    try:
        return domain.index(value)
    except ValueError:
        raise EncodeError(f"{what} = {value!r} not in domain {domain}") from None


def encode(arch: ArchitectureDescriptor, config: SearchSpaceConfig) -> Genome:
    """Inverse of decode: canonical genome with inactive genes set to 0."""
    cnn_blocks = arch.cnn_blocks
    vit_blocks = arch.vit_blocks
    pools = [b for b in arch.blocks if isinstance(b, PoolingBlockSpec)]
    classifiers = [b for b in arch.blocks if isinstance(b, ClassifierSpec)]
    if len(pools) != 1 or len(classifiers) != 1:
        raise EncodeError("architecture must have exactly one pooling block and one classifier")
    expected = (
        list(cnn_blocks) + [pools[0]] + list(vit_blocks) + [classifiers[0]]
    )
    if list(arch.blocks) != expected:
        raise EncodeError("blocks out of skeleton order: CNN+ Pool HybridViT+ Classifier")
    if classifiers[0].num_classes != config.num_classes:
        raise EncodeError(
            f"classifier num_classes {classifiers[0].num_classes} != config {config.num_classes}"
        )

    genes = [
        _index_of(config.cnn_depth, len(cnn_blocks), "cnn_depth"),
        _index_of(config.vit_depth, len(vit_blocks), "vit_depth"),
    ]

    def encode_cnn(block: CNNBlockSpec, where: str) -> list[int]:
        return [
            _index_of(getattr(config.cnn_blocks, g), getattr(block, g), f"{where}.{g}")
            for g in _CNN_GENES
        ]

    def encode_pool(block: PoolingBlockSpec, where: str) -> list[int]:
        return [
            _index_of(getattr(config.pooling, g), getattr(block, g), f"{where}.{g}")
            for g in _POOL_GENES
        ]

    for i in range(config.max_cnn_depth):
        if i < len(cnn_blocks):
            genes.extend(encode_cnn(cnn_blocks[i], f"cnn{i}"))
        else:
            genes.extend([0] * len(_CNN_GENES))

    genes.extend(encode_pool(pools[0], "pool"))

    for i in range(config.max_vit_depth):
        if i < len(vit_blocks):
            block = vit_blocks[i]
            if block.kind not in HYBRID_KINDS:
                raise EncodeError(f"vit{i}.kind = {block.kind!r} unknown")
            if block.kind == "cnn_vit" and not isinstance(block.prefix, CNNBlockSpec):
                raise EncodeError(f"vit{i}: cnn_vit block requires a CNN prefix")
            if block.kind == "pool_vit" and not isinstance(block.prefix, PoolingBlockSpec):
                raise EncodeError(f"vit{i}: pool_vit block requires a pooling prefix")
            if block.kind == "vit" and block.prefix is not None:
                raise EncodeError(f"vit{i}: plain vit block must not carry a prefix")
            genes.append(_index_of(config.vit_blocks.kind, block.kind, f"vit{i}.kind"))
            genes.append(_index_of(config.vit_blocks.heads, block.heads, f"vit{i}.heads"))
            genes.append(_index_of(config.vit_blocks.qkv_dim, block.qkv_dim, f"vit{i}.qkv_dim"))
            genes.append(_index_of(config.vit_blocks.use_ff, block.use_ff, f"vit{i}.use_ff"))
            if block.use_ff:
                if block.ff_dim is None:
                    raise EncodeError(f"vit{i}: use_ff without ff_dim")
                genes.append(_index_of(config.vit_blocks.ff_dim, block.ff_dim, f"vit{i}.ff_dim"))
            else:
                if block.ff_dim is not None:
                    raise EncodeError(f"vit{i}: ff_dim set while use_ff is false")
                genes.append(0)
            genes.append(
                _index_of(config.vit_blocks.attn_kind, block.attn_kind, f"vit{i}.attn_kind")
            )
            if isinstance(block.prefix, CNNBlockSpec):
                genes.extend(encode_cnn(block.prefix, f"vit{i}.prefix_cnn"))
                genes.extend([0] * len(_POOL_GENES))
            elif isinstance(block.prefix, PoolingBlockSpec):
                genes.extend([0] * len(_CNN_GENES))
                genes.extend(encode_pool(block.prefix, f"vit{i}.prefix_pool"))
            else:
                genes.extend([0] * (len(_CNN_GENES) + len(_POOL_GENES)))
        else:
            genes.extend([0] * (len(_VIT_GENES) + len(_CNN_GENES) + len(_POOL_GENES)))

    return Genome(tuple(genes))


def active_gene_mask(genome: Genome, config: SearchSpaceConfig) -> tuple[bool, ...]:
    """True at positions that influence the decoded architecture."""
    sites = gene_sites(config)
    _check_genome(genome, sites)
    cnn_depth = config.cnn_depth[genome.genes[0]]
    vit_depth = config.vit_depth[genome.genes[1]]

    mask = [True, True]
    for i in range(config.max_cnn_depth):
        mask.extend([i < cnn_depth] * len(_CNN_GENES))
    mask.extend([True] * len(_POOL_GENES))

    pos = len(mask)
    for i in range(config.max_vit_depth):
        if i < vit_depth:
            kind = config.vit_blocks.kind[genome.genes[pos]]
            use_ff = config.vit_blocks.use_ff[genome.genes[pos + 3]]
            mask.extend([True, True, True, True, use_ff, True])
            mask.extend([kind == "cnn_vit"] * len(_CNN_GENES))
            mask.extend([kind == "pool_vit"] * len(_POOL_GENES))
        else:
            mask.extend([False] * (len(_VIT_GENES) + len(_CNN_GENES) + len(_POOL_GENES)))
        pos += len(_VIT_GENES) + len(_CNN_GENES) + len(_POOL_GENES)
    return tuple(mask)


def iterate_genomes(config: SearchSpaceConfig) -> Iterator[Genome]:
    """Exhaustively enumerate all canonical genomes of the space.

    Canonical means inactive genes are zero, so distinct yielded genomes
    decode to distinct architectures.  Intended for toy spaces.
    """
    sites = gene_sites(config)
    for depth_pair in itertools.product(
        range(len(config.cnn_depth)), range(len(config.vit_depth))
    ):
        base = Genome(tuple([depth_pair[0], depth_pair[1]] + [0] * (len(sites) - 2)))
        mask = active_gene_mask(base, config)
        # The ViT kind and use_ff genes change the mask, so enumerate
        # architectures by recursive descent over positions.
        yield from _enumerate_from(base, config, sites, mask, position=2)


def _enumerate_from(genome, config, sites, mask, position):
    if position == len(sites):
        yield genome
        return
    if not mask[position]:
        yield from _enumerate_from(genome, config, sites, mask, position + 1)
        return
    for choice in range(len(sites[position].domain)):
        candidate = genome.replaced(position, choice)
        new_mask = active_gene_mask(candidate, config)
        yield from _enumerate_from(candidate, config, sites, new_mask, position + 1)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    block_index: int
    rule_id: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    valid: bool
    violations: tuple[Violation, ...]

    @classmethod
    def from_violations(cls, violations: Sequence[Violation]) -> "ValidationReport":
        return cls(valid=not violations, violations=tuple(violations))


RULE_GROUP_DIVISIBILITY = "group_divisibility"
RULE_HEAD_DIVISIBILITY = "head_divisibility"
RULE_SPATIAL_UNDERFLOW = "spatial_underflow"
RULE_FF_EXPANSION = "ff_expansion"


def validate(arch: ArchitectureDescriptor, config: SearchSpaceConfig) -> ValidationReport:
    """Collect all structural violations of an architecture.

    Checks grouped-convolution divisibility, attention head divisibility,
    feed-forward expansion semantics, and that shape inference keeps every
    spatial dimension >= 1.
    """
    from hybridnas import graph as graph_ir  # deferred: graph imports this module

    violations: list[Violation] = []
    net = graph_ir.lower(arch, config)

    for node in net.nodes.values():
        if node.op == "conv2d":
            groups = node.params["groups"]
            in_ch = node.params["in_channels"]
            out_ch = node.params["out_channels"]
            if in_ch % groups != 0 or out_ch % groups != 0:
                violations.append(
                    Violation(
                        block_index=node.block_index,
                        rule_id=RULE_GROUP_DIVISIBILITY,
                        message=(
                            f"conv node {node.id}: channels ({in_ch} -> {out_ch}) "
                            f"not divisible by groups={groups}"
                        ),
                    )
                )
        elif node.op == "mhsa":
            heads = node.params["heads"]
            qkv_dim = node.params["qkv_dim"]
            if qkv_dim % heads != 0:
                violations.append(
                    Violation(
                        block_index=node.block_index,
                        rule_id=RULE_HEAD_DIVISIBILITY,
                        message=f"qkv_dim={qkv_dim} not divisible by heads={heads}",
                    )
                )
        elif node.op == "feedforward":
            d_model = node.params["d_model"]
            ff_dim = node.params["ff_dim"]
            if ff_dim < d_model:
                violations.append(
                    Violation(
                        block_index=node.block_index,
                        rule_id=RULE_FF_EXPANSION,
                        message=f"ff_dim={ff_dim} < channel dim {d_model}",
                    )
                )

    try:
        graph_ir.infer_shapes(net, config.input_shape)
    except ShapeUnderflowError as exc:
        violations.append(
            Violation(
                block_index=net.nodes[exc.node_id].block_index,
                rule_id=RULE_SPATIAL_UNDERFLOW,
                message=str(exc),
            )
        )

    return ValidationReport.from_violations(violations)


# ---------------------------------------------------------------------------
# Mutation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MutationResult:
    genome: Genome
    stagnated: bool
    attempts: int


def mutate(
    genome: Genome, config: SearchSpaceConfig, rng: np.random.Generator
) -> MutationResult:
    """Resample exactly one gene, excluding its current value.

    The mutated position is drawn uniformly among genes with at least two
    choices (depth genes included).  A child whose decoded architecture
    fails ``validate`` is discarded and the mutation retried; after
    ``MUTATION_RETRIES`` failures the parent is returned with the
    stagnation flag set.  Spaces with no mutable gene stagnate immediately.
    """
    sites = gene_sites(config)
    _check_genome(genome, sites)
    mutable = [i for i, site in enumerate(sites) if len(site.domain) >= 2]
    if not mutable:
        return MutationResult(genome=genome, stagnated=True, attempts=0)

    for attempt in range(1, MUTATION_RETRIES + 1):
        position = mutable[int(rng.integers(0, len(mutable)))]
        size = len(sites[position].domain)
        offset = int(rng.integers(1, size))  # 1..size-1 skips the current value
        value = (genome.genes[position] + offset) % size
        child = genome.replaced(position, value)
        if validate(decode(child, config), config).valid:
            return MutationResult(genome=child, stagnated=False, attempts=attempt)
    return MutationResult(genome=genome, stagnated=True, attempts=MUTATION_RETRIES)

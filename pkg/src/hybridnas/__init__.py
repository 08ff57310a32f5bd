"""Evolutionary architecture search over a hybrid CNN-ViT space for tinyML targets.

The package is organized as a pipeline:

    space   -- searchable parameter domains, genome encode/decode, mutation
    graph   -- lowering of block descriptors to a layer-level DAG with shapes
    kernels -- float64 reference forward implementations with MAC instrumentation
    costs   -- analytical parameter / MAC / ROM / RAM / latency estimation
    search  -- aging evolution with randomized scalarization and Pareto tools
    report  -- population statistics, CSV logs, SVG scatter plots
    service -- FastAPI wrapper exposing the engine to HTTP clients
    cli     -- command-line entry points
"""

from hybridnas.space import (
    ArchitectureDescriptor,
    Genome,
    SearchSpaceConfig,
    decode,
    default_space,
    encode,
    mutate,
    sample,
    validate,
)
from hybridnas.graph import NetworkGraph, infer_shapes, lower, topological_schedule
from hybridnas.costs import CostReport, DeploymentAssumptions, evaluate_costs
from hybridnas.search import SearchConfig, SearchHistory, pareto_front, run_search

__version__ = "0.1.0"

__all__ = [
    "ArchitectureDescriptor",
    "CostReport",
    "DeploymentAssumptions",
    "Genome",
    "NetworkGraph",
    "SearchConfig",
    "SearchHistory",
    "SearchSpaceConfig",
    "decode",
    "default_space",
    "encode",
    "evaluate_costs",
    "infer_shapes",
    "lower",
    "mutate",
    "pareto_front",
    "run_search",
    "sample",
    "topological_schedule",
    "validate",
]

"""Command-line surface.

Subcommands:
    search             run an evolutionary search, write logs and plots
    estimate           print the cost report of one architecture graph
    sample             sample one valid architecture and dump its graph JSON
    reference-forward  run the float64 reference network on one input
    stats              recompute population statistics from saved logs
    serve              start the HTTP service

Exit codes: 0 success, 2 usage error, 3 infeasible constraint,
4 evaluator spawn failure.

The NAS_LOG_LEVEL environment variable (error|info|debug) controls logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from hybridnas import costs as costmodel
from hybridnas import graph as graph_ir
from hybridnas import kernels, report, search, space as space_mod
from hybridnas.errors import (
    ConfigurationError,
    HybridNasError,
    InfeasibleConstraintError,
)

logger = logging.getLogger("hybridnas")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_SPAWN = 4

# Objectives used for the pareto.csv / scatter.svg outputs of `search`.
FRONT_OBJECTIVES = (("val_accuracy", "max"), ("params", "min"))


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("NAS_LOG_LEVEL", "error").lower(), logging.ERROR
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _existing_file(parser: argparse.ArgumentParser, path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        parser.error(f"file not found: {path}")
    return p


def _load_assumptions(path: str | None) -> costmodel.DeploymentAssumptions:
    if path is None:
        return costmodel.DeploymentAssumptions()
    return costmodel.load_assumptions(path)


def _ensure_shapes(graph: graph_ir.NetworkGraph) -> graph_ir.NetworkGraph:
    if all(node.shape is not None for node in graph.nodes.values()):
        return graph
    input_shape = graph.nodes[graph.input_id].shape
    if input_shape is None:
        raise ConfigurationError("graph JSON carries no shapes and no input shape")
    return graph_ir.infer_shapes(graph, tuple(input_shape))


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def cmd_search(args, parser) -> int:
    space = space_mod.load_space(_existing_file(parser, args.space))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    config = search.SearchConfig(
        population_size=args.population,
        tournament_size=args.tournament,
        evaluation_budget=args.budget,
        seed=args.seed,
        max_params=args.max_params,
        parallelism=args.parallel,
        epochs=args.epochs,
        timeout_s=args.timeout,
    )
    assumptions = _load_assumptions(args.assumptions)

    try:
        evaluator = search.make_evaluator(args.evaluator, timeout_s=args.timeout)
    except ConfigurationError as exc:
        parser.error(str(exc))
    except (FileNotFoundError, PermissionError, OSError) as exc:
        print(f"error: failed to spawn evaluator: {exc}", file=sys.stderr)
        return EXIT_SPAWN

    try:
        with evaluator:
            history = search.run_search(space, config, evaluator, assumptions)
    except InfeasibleConstraintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE

    history.write_csv(out_dir / "history.csv")
    history.write_genomes(out_dir / "genomes.json")

    ok = history.ok()
    front = search.pareto_front(ok, FRONT_OBJECTIVES)
    report.write_pareto_csv(history, front, out_dir / "pareto.csv")
    rows = report.population_stats(history)
    report.write_stats_csv(rows, out_dir / "stats.csv")
    points = [(float(c.cost.params), float(c.val_accuracy)) for c in ok]
    front_points = [(float(c.cost.params), float(c.val_accuracy)) for c in front]
    report.emit_scatter(
        points, front_points, ("parameters", "val_accuracy"), out_dir / "scatter.svg"
    )

    best = history.best_by_accuracy()
    if best is None:
        print("no candidate evaluated successfully")
    else:
        print(
            f"best candidate {best.id}: val_accuracy={best.val_accuracy:.4f} "
            f"params={best.cost.params} macs={best.cost.macs} "
            f"ram={best.cost.ram_bytes} latency={best.cost.latency_proxy:.1f}"
        )
        print(f"evaluated {len(history)} candidates; front size {len(front)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate / sample / reference-forward / stats
# ---------------------------------------------------------------------------


def cmd_estimate(args, parser) -> int:
    graph = graph_ir.load_graph(_existing_file(parser, args.arch))
    graph = _ensure_shapes(graph)
    assumptions = _load_assumptions(args.assumptions)
    print(json.dumps(costmodel.evaluate_costs(graph, assumptions).to_json(), indent=2))
    return EXIT_OK


def cmd_sample(args, parser) -> int:
    space = space_mod.load_space(_existing_file(parser, args.space))
    rng = np.random.default_rng(args.seed)
    max_params = args.max_params if args.max_params is not None else space.max_params
    for _ in range(search.SEED_SAMPLING_ATTEMPTS):
        genome = space_mod.sample_genome(space, rng)
        arch = space_mod.decode(genome, space)
        if not space_mod.validate(arch, space).valid:
            continue
        graph = graph_ir.infer_shapes(graph_ir.lower(arch, space), space.input_shape)
        cost = costmodel.evaluate_costs(graph)
        if cost.params > max_params:
            continue
        graph_ir.save_graph(graph, args.out)
        if args.genome_out:
            with open(args.genome_out, "w", encoding="utf-8") as fh:
                json.dump(genome.to_json(), fh)
                fh.write("\n")
        print(json.dumps({"params": cost.params, "macs": cost.macs, "nodes": len(graph)}))
        return EXIT_OK
    print("error: no valid candidate found within budget", file=sys.stderr)
    return EXIT_INFEASIBLE


def cmd_reference_forward(args, parser) -> int:
    graph = graph_ir.load_graph(_existing_file(parser, args.arch))
    graph = _ensure_shapes(graph)
    params = kernels.init_params(graph, args.seed)
    input_shape = graph.nodes[graph.input_id].shape
    if args.input:
        with open(_existing_file(parser, args.input), "r", encoding="utf-8") as fh:
            x = np.asarray(json.load(fh), dtype=np.float64)
    else:
        x = np.random.default_rng(args.seed + 1).uniform(-1.0, 1.0, size=input_shape)
    counter = kernels.OpCounter()
    logits = kernels.network_forward(graph, params, x, counter)
    if args.dump_weights:
        kernels.save_params(params, args.dump_weights)
    if args.dump_input:
        with open(args.dump_input, "w", encoding="utf-8") as fh:
            json.dump(x.tolist(), fh)
    print(json.dumps({"logits": logits.tolist(), "macs": counter.total}))
    return EXIT_OK


def cmd_stats(args, parser) -> int:
    space = space_mod.load_space(_existing_file(parser, args.space))
    out_dir = Path(args.out)
    rows_by_id = {
        row["id"]: row for row in search.read_history_csv(_existing_file(parser, str(out_dir / "history.csv")))
    }
    genomes = search.read_genomes_json(_existing_file(parser, str(out_dir / "genomes.json")))
    stats_rows = []
    for cid, row in rows_by_id.items():
        if row["status"] != "ok":
            continue
        arch = space_mod.decode(genomes[cid], space)
        graph = graph_ir.infer_shapes(graph_ir.lower(arch, space), space.input_shape)
        max_channels = max(node.shape[0] for node in graph.nodes.values())
        stats_rows.append(
            report.PopulationRow(
                id=cid,
                depth=arch.depth,
                max_channels=max_channels,
                params=int(row["params"]),
                val_accuracy=float(row["val_accuracy"]),
            )
        )
    report.write_stats_csv(stats_rows, out_dir / "stats.csv")
    print(f"wrote {len(stats_rows)} rows to {out_dir / 'stats.csv'}")
    return EXIT_OK


def cmd_serve(args, parser) -> int:
    import uvicorn

    from hybridnas.service import app

    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridnas",
        description="Evolutionary search over a hybrid CNN-ViT space for tinyML.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run an evolutionary search")
    p.add_argument("--space", required=True, help="search-space JSON file")
    p.add_argument("--budget", type=int, default=2000, help="total evaluations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-params", type=int, default=None, help="parameter budget override")
    p.add_argument(
        "--evaluator",
        default="synthetic-param-target",
        help="builtin name (constant | synthetic-param-target | negative-macs) "
        "or extern:<command>",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--parallel", type=int, default=1, help="in-flight evaluations")
    p.add_argument("--population", type=int, default=100)
    p.add_argument("--tournament", type=int, default=25)
    p.add_argument("--epochs", type=int, default=10, help="epochs per external evaluation")
    p.add_argument("--timeout", type=float, default=600.0, help="per-candidate timeout (s)")
    p.add_argument("--assumptions", default=None, help="deployment assumptions JSON")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("estimate", help="cost report for one architecture graph")
    p.add_argument("--arch", required=True, help="graph JSON file")
    p.add_argument("--assumptions", default=None, help="deployment assumptions JSON")
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("sample", help="sample one valid architecture")
    p.add_argument("--space", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="graph JSON output path")
    p.add_argument("--genome-out", default=None, help="also dump the genome JSON")
    p.add_argument("--max-params", type=int, default=None)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("reference-forward", help="run the reference kernels on one input")
    p.add_argument("--arch", required=True, help="graph JSON file")
    p.add_argument("--seed", type=int, default=0, help="parameter init seed")
    p.add_argument("--input", default=None, help="input tensor JSON (nested lists)")
    p.add_argument("--dump-weights", default=None, help="write materialized weights JSON")
    p.add_argument("--dump-input", default=None, help="write the input tensor JSON")
    p.set_defaults(fn=cmd_reference_forward)

    p = sub.add_parser("stats", help="recompute stats.csv from saved logs")
    p.add_argument("--space", required=True)
    p.add_argument("--out", required=True, help="directory holding history.csv/genomes.json")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args, parser)
    except InfeasibleConstraintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except HybridNasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""HTTP wrapper around the engine for multi-client deployments.

Sampling, mutation, validation, cost estimation and Pareto extraction are
cheap request/response operations; small synchronous searches are allowed
up to a budget cap.  Long searches belong on the CLI, which writes the
full log files.
"""

from __future__ import annotations

from typing import Any, Literal

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from hybridnas import costs as costmodel
from hybridnas import graph as graph_ir
from hybridnas import search, space as space_mod
from hybridnas.errors import HybridNasError

MAX_SERVICE_BUDGET = 2000

app = FastAPI(
    title="hybridnas",
    description="Hybrid CNN-ViT architecture search engine",
    version="0.1.0",
)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class SampleRequest(BaseModel):
    space: dict[str, Any] = Field(description="search-space JSON document")
    seed: int = 0
    require_valid: bool = True
    max_attempts: int = 1000


class SampleResponse(BaseModel):
    genome: list[int]
    valid: bool
    graph: dict[str, Any]
    cost: dict[str, Any]


class ValidateRequest(BaseModel):
    space: dict[str, Any]
    genome: list[int]


class ViolationModel(BaseModel):
    block_index: int
    rule_id: str
    message: str


class ValidateResponse(BaseModel):
    valid: bool
    violations: list[ViolationModel]


class MutateRequest(BaseModel):
    space: dict[str, Any]
    genome: list[int]
    seed: int = 0


class MutateResponse(BaseModel):
    genome: list[int]
    stagnated: bool


class EstimateRequest(BaseModel):
    graph: dict[str, Any]
    assumptions: dict[str, Any] | None = None


class ParetoRequest(BaseModel):
    points: list[dict[str, float]] = Field(description="objective name -> value per point")
    objectives: list[tuple[str, Literal["max", "min"]]]


class ParetoResponse(BaseModel):
    front_indices: list[int]


class SearchRequest(BaseModel):
    space: dict[str, Any]
    budget: int = Field(default=200, le=MAX_SERVICE_BUDGET)
    seed: int = 0
    population: int = 25
    tournament: int = 8
    max_params: int | None = None
    evaluator: str = "synthetic-param-target"


class CandidateModel(BaseModel):
    id: str
    parent_id: str | None
    params: int
    macs: int
    rom_bytes: int
    ram_bytes: int
    latency_proxy: float
    val_accuracy: float | None
    status: str
    genome: list[int]


class SearchResponse(BaseModel):
    candidates: list[CandidateModel]
    pareto_ids: list[str]
    best_id: str | None


# ---------------------------------------------------------------------------
# Endpoints
# ---------------------------------------------------------------------------


def _space(doc: dict) -> space_mod.SearchSpaceConfig:
    try:
        return space_mod.space_from_json(doc)
    except HybridNasError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


def _genome(doc: list[int], space: space_mod.SearchSpaceConfig) -> space_mod.Genome:
    genome = space_mod.Genome.from_json(doc)
    if len(genome) != space_mod.genome_length(space):
        raise HTTPException(
            status_code=422,
            detail=f"genome length {len(genome)} != {space_mod.genome_length(space)}",
        )
    return genome


@app.get("/health")
def health() -> dict[str, str]:
    return {"status": "ok"}


@app.post("/space/sample", response_model=SampleResponse)
def sample_endpoint(request: SampleRequest) -> SampleResponse:
    space = _space(request.space)
    rng = np.random.default_rng(request.seed)
    attempts = request.max_attempts if request.require_valid else 1
    genome = None
    for _ in range(max(attempts, 1)):
        genome = space_mod.sample_genome(space, rng)
        if not request.require_valid:
            break
        if space_mod.validate(space_mod.decode(genome, space), space).valid:
            break
    else:
        raise HTTPException(status_code=409, detail="no valid sample found")
    arch = space_mod.decode(genome, space)
    valid = space_mod.validate(arch, space).valid
    if valid:
        graph = graph_ir.infer_shapes(graph_ir.lower(arch, space), space.input_shape)
        cost = costmodel.evaluate_costs(graph).to_json()
    else:
        graph = graph_ir.lower(arch, space)
        cost = {}
    return SampleResponse(
        genome=genome.to_json(), valid=valid, graph=graph_ir.graph_to_json(graph), cost=cost
    )


@app.post("/space/validate", response_model=ValidateResponse)
def validate_endpoint(request: ValidateRequest) -> ValidateResponse:
    space = _space(request.space)
    genome = _genome(request.genome, space)
    try:
        arch = space_mod.decode(genome, space)
    except HybridNasError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    result = space_mod.validate(arch, space)
    return ValidateResponse(
        valid=result.valid,
        violations=[
            ViolationModel(block_index=v.block_index, rule_id=v.rule_id, message=v.message)
            for v in result.violations
        ],
    )


@app.post("/space/mutate", response_model=MutateResponse)
def mutate_endpoint(request: MutateRequest) -> MutateResponse:
    space = _space(request.space)
    genome = _genome(request.genome, space)
    try:
        result = space_mod.mutate(genome, space, np.random.default_rng(request.seed))
    except HybridNasError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return MutateResponse(genome=result.genome.to_json(), stagnated=result.stagnated)


@app.post("/arch/estimate")
def estimate_endpoint(request: EstimateRequest) -> dict[str, Any]:
    try:
        graph = graph_ir.graph_from_json(request.graph)
        if any(node.shape is None for node in graph.nodes.values()):
            input_shape = graph.nodes[graph.input_id].shape
            if input_shape is None:
                raise HTTPException(status_code=422, detail="graph carries no shapes")
            graph = graph_ir.infer_shapes(graph, tuple(input_shape))
        assumptions = (
            costmodel.assumptions_from_json(request.assumptions)
            if request.assumptions
            else costmodel.DeploymentAssumptions()
        )
        return costmodel.evaluate_costs(graph, assumptions).to_json()
    except HybridNasError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise HTTPException(status_code=422, detail=f"malformed graph: {exc}") from exc


@app.post("/pareto", response_model=ParetoResponse)
def pareto_endpoint(request: ParetoRequest) -> ParetoResponse:
    names = [name for name, _ in request.objectives]
    for i, point in enumerate(request.points):
        missing = [n for n in names if n not in point]
        if missing:
            raise HTTPException(
                status_code=422, detail=f"point {i} missing objectives {missing}"
            )
    oriented = [
        tuple(
            point[name] if direction == "max" else -point[name]
            for name, direction in request.objectives
        )
        for point in request.points
    ]
    front = [
        i
        for i in range(len(oriented))
        if not any(
            search.dominates(oriented[j], oriented[i])
            for j in range(len(oriented))
            if j != i
        )
    ]
    return ParetoResponse(front_indices=front)


@app.post("/search/run", response_model=SearchResponse)
def search_endpoint(request: SearchRequest) -> SearchResponse:
    space = _space(request.space)
    if request.evaluator not in search.BUILTIN_EVALUATORS:
        raise HTTPException(
            status_code=422,
            detail=f"service searches support builtin evaluators only: "
            f"{sorted(search.BUILTIN_EVALUATORS)}",
        )
    try:
        config = search.SearchConfig(
            population_size=request.population,
            tournament_size=request.tournament,
            evaluation_budget=request.budget,
            seed=request.seed,
            max_params=request.max_params,
        )
        history = search.run_search(
            space, config, search.BUILTIN_EVALUATORS[request.evaluator]()
        )
    except HybridNasError as exc:
        raise HTTPException(status_code=409, detail=str(exc)) from exc
    front = search.pareto_front(history.ok(), (("val_accuracy", "max"), ("params", "min")))
    best = history.best_by_accuracy()
    return SearchResponse(
        candidates=[
            CandidateModel(
                id=c.id,
                parent_id=c.parent_id,
                params=c.cost.params,
                macs=c.cost.macs,
                rom_bytes=c.cost.rom_bytes,
                ram_bytes=c.cost.ram_bytes,
                latency_proxy=c.cost.latency_proxy,
                val_accuracy=c.val_accuracy,
                status=c.status,
                genome=c.genome.to_json(),
            )
            for c in history.candidates
        ],
        pareto_ids=[c.id for c in front],
        best_id=best.id if best else None,
    )

"""Aging evolution with randomized scalarization under a parameter budget.

One search step draws a tournament from the population, scores it with a
freshly drawn weight vector over min-max-normalized objectives, mutates the
winner, and evaluates the child; the oldest population member is evicted on
every insertion.  Candidates violating the hard parameter budget are never
evaluated.

Evaluators are pluggable: built-in synthetic evaluators serve tests and
machinery benchmarks, while the external evaluator drives a child process
speaking a JSON-lines protocol (one ``evaluate`` request per candidate,
responses matched by id, ``shutdown`` at the end).
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from hybridnas.costs import CostReport, DeploymentAssumptions, evaluate_costs
from hybridnas.errors import (
    ConfigurationError,
    InfeasibleConstraintError,
    ProtocolError,
)
from hybridnas.graph import graph_to_json, infer_shapes, lower
from hybridnas.space import (
    ArchitectureDescriptor,
    Genome,
    SearchSpaceConfig,
    decode,
    mutate,
    sample_genome,
    validate,
)

logger = logging.getLogger(__name__)

# (objective name, direction); direction is "max" or "min".
DEFAULT_OBJECTIVES: tuple[tuple[str, str], ...] = (
    ("val_accuracy", "max"),
    ("params", "min"),
    ("macs", "min"),
    ("ram_bytes", "min"),
    ("latency_proxy", "min"),
)

SEED_SAMPLING_ATTEMPTS = 1000
CHILD_RETRY_ATTEMPTS = 100

HISTORY_COLUMNS = (
    "id",
    "parent_id",
    "params",
    "macs",
    "rom",
    "ram",
    "latency_proxy",
    "val_accuracy",
    "status",
)


@dataclass
class SearchConfig:
    """Knobs of one search run."""

    population_size: int = 100
    tournament_size: int = 25
    evaluation_budget: int = 2000
    seed: int = 0
    max_params: int | None = None  # falls back to the space's budget
    parallelism: int = 1
    epochs: int = 10  # forwarded to external evaluators
    timeout_s: float = 600.0
    objectives: tuple[tuple[str, str], ...] = DEFAULT_OBJECTIVES

    def __post_init__(self):
        if self.population_size < 1 or self.tournament_size < 1:
            raise ConfigurationError("population and tournament sizes must be >= 1")
        if self.tournament_size > self.population_size:
            raise ConfigurationError("tournament_size must be <= population_size")
        if self.evaluation_budget < self.population_size:
            raise ConfigurationError("evaluation_budget must be >= population_size")
        if self.parallelism < 1:
            raise ConfigurationError("parallelism must be >= 1")
        for _, direction in self.objectives:
            if direction not in ("max", "min"):
                raise ConfigurationError(f"bad objective direction {direction!r}")


@dataclass
class Candidate:
    """One evaluated (or failed) architecture."""

    id: str
    birth_index: int
    parent_id: str | None
    genome: Genome
    arch: ArchitectureDescriptor
    graph_json: dict
    cost: CostReport
    val_accuracy: float | None = None
    status: str = "pending"
    error_message: str | None = None
    created_at: float = 0.0

    def objective_values(self) -> dict[str, float]:
        return {
            "val_accuracy": self.val_accuracy if self.val_accuracy is not None else 0.0,
            "params": float(self.cost.params),
            "macs": float(self.cost.macs),
            "ram_bytes": float(self.cost.ram_bytes),
            "latency_proxy": float(self.cost.latency_proxy),
        }


@dataclass
class SearchHistory:
    """Append-only log of every evaluated candidate."""

    candidates: list[Candidate] = field(default_factory=list)

    def append(self, candidate: Candidate) -> None:
        if candidate.birth_index != len(self.candidates):
            raise ConfigurationError("history indices must be dense and in birth order")
        self.candidates.append(candidate)

    def ok(self) -> list[Candidate]:
        return [c for c in self.candidates if c.status == "ok"]

    def best_by_accuracy(self) -> Candidate | None:
        ok = self.ok()
        if not ok:
            return None
        return max(ok, key=lambda c: (c.val_accuracy, -c.birth_index))

    def __len__(self) -> int:
        return len(self.candidates)

    # -- persistence --------------------------------------------------------

    def csv_rows(self) -> list[list[str]]:
        rows = [list(HISTORY_COLUMNS)]
        for c in self.candidates:
            rows.append(
                [
                    c.id,
                    c.parent_id or "",
                    str(c.cost.params),
                    str(c.cost.macs),
                    str(c.cost.rom_bytes),
                    str(c.cost.ram_bytes),
                    repr(float(c.cost.latency_proxy)),
                    "" if c.val_accuracy is None else repr(float(c.val_accuracy)),
                    c.status,
                ]
            )
        return rows

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for row in self.csv_rows():
                fh.write(",".join(row))
                fh.write("\n")

    def write_genomes(self, path: str | Path) -> None:
        doc = {c.id: c.genome.to_json() for c in self.candidates}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_history_csv(path: str | Path) -> list[dict[str, str]]:
    """Parse a history.csv written by this engine back into row dicts."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    header = lines[0].split(",")
    if tuple(header) != HISTORY_COLUMNS:
        raise ProtocolError(f"unexpected history header {header}")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def read_genomes_json(path: str | Path) -> dict[str, Genome]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return {key: Genome.from_json(value) for key, value in doc.items()}


# ---------------------------------------------------------------------------
# Scalarization
# ---------------------------------------------------------------------------


@dataclass
class RunningRange:
    """Running min/max of one raw objective over the history."""

    lo: float | None = None
    hi: float | None = None

    def update(self, value: float) -> None:
        self.lo = value if self.lo is None else min(self.lo, value)
        self.hi = value if self.hi is None else max(self.hi, value)

    def normalize(self, value: float) -> float:
        # Degenerate range: the objective carries no signal yet.
        if self.lo is None or self.hi is None or self.hi == self.lo:
            return 0.5
        return (value - self.lo) / (self.hi - self.lo)


def scalarize(
    normalized: Sequence[float], weights: Sequence[float], directions: Sequence[str]
) -> float:
    """Weighted sum of direction-adjusted normalized objectives.

    Minimized objectives contribute weight * (1 - value), so a candidate
    that is best on every front scores 1.0 and one worst on every front 0.0.
    """
    if not (len(normalized) == len(weights) == len(directions)):
        raise ConfigurationError("scalarize: length mismatch")
    score = 0.0
    for value, weight, direction in zip(normalized, weights, directions):
        score += weight * (value if direction == "max" else 1.0 - value)
    return score


def scalarize_candidate(
    candidate: Candidate,
    weights: Sequence[float],
    ranges: dict[str, RunningRange],
    objectives: Sequence[tuple[str, str]],
) -> float:
    values = candidate.objective_values()
    normalized = [ranges[name].normalize(values[name]) for name, _ in objectives]
    return scalarize(normalized, weights, [d for _, d in objectives])


# ---------------------------------------------------------------------------
# Pareto front
# ---------------------------------------------------------------------------


def _oriented(candidate: Candidate, objectives: Sequence[tuple[str, str]]) -> tuple[float, ...]:
    values = candidate.objective_values()
    return tuple(
        values[name] if direction == "max" else -values[name] for name, direction in objectives
    )


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """True iff a is >= b everywhere and > somewhere (both oriented to max)."""
    return all(x >= y for x, y in zip(a, b)) and any(x > y for x, y in zip(a, b))


def pareto_front(
    candidates: Sequence[Candidate],
    objectives: Sequence[tuple[str, str]] = DEFAULT_OBJECTIVES,
) -> list[Candidate]:
    """Exactly the non-dominated subset, ordered by birth_index."""
    oriented = [_oriented(c, objectives) for c in candidates]
    front = []
    for i, candidate in enumerate(candidates):
        if not any(dominates(oriented[j], oriented[i]) for j in range(len(candidates)) if j != i):
            front.append(candidate)
    return sorted(front, key=lambda c: c.birth_index)


# ---------------------------------------------------------------------------
# Evaluators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalRequest:
    id: str
    graph_json: dict
    epochs: int
    cost: CostReport | None = None


@dataclass(frozen=True)
class EvalResult:
    id: str
    status: str  # "ok" | "error"
    val_accuracy: float | None = None
    message: str | None = None


class Evaluator:
    """Submit/collect interface; submissions may be pipelined."""

    def submit(self, request: EvalRequest) -> None:
        raise NotImplementedError

    def collect(self, request_id: str) -> EvalResult:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class BuiltinEvaluator(Evaluator):
    """Wraps a pure scoring function of the request."""

    def __init__(self, fn: Callable[[EvalRequest], float]):
        self._fn = fn
        self._results: dict[str, EvalResult] = {}

    def submit(self, request: EvalRequest) -> None:
        try:
            score = float(self._fn(request))
            self._results[request.id] = EvalResult(request.id, "ok", val_accuracy=score)
        except Exception as exc:  # noqa: BLE001 - evaluator failures become statuses
            self._results[request.id] = EvalResult(request.id, "error", message=str(exc))

    def collect(self, request_id: str) -> EvalResult:
        return self._results.pop(request_id)


def constant_evaluator(value: float = 0.5) -> BuiltinEvaluator:
    return BuiltinEvaluator(lambda request: value)


def param_target_evaluator(target: int = 50_000) -> BuiltinEvaluator:
    """Synthetic fitness peaking at `target` parameters: 1 - |p - t| / t."""

    def fn(request: EvalRequest) -> float:
        if request.cost is None:
            raise ConfigurationError("param-target evaluator needs cost info")
        return 1.0 - abs(request.cost.params - target) / target

    return BuiltinEvaluator(fn)


def negative_macs_evaluator() -> BuiltinEvaluator:
    """Benchmark evaluator rewarding low compute: score = -MACs."""

    def fn(request: EvalRequest) -> float:
        if request.cost is None:
            raise ConfigurationError("negative-macs evaluator needs cost info")
        return -float(request.cost.macs)

    return BuiltinEvaluator(fn)


BUILTIN_EVALUATORS: dict[str, Callable[[], BuiltinEvaluator]] = {
    "constant": constant_evaluator,
    "synthetic-param-target": param_target_evaluator,
    "negative-macs": negative_macs_evaluator,
}


class ExternalEvaluator(Evaluator):
    """Drives a child process over the JSON-lines wire protocol.

    request:  {"type": "evaluate", "id": str, "epochs": int, "arch": graph}
    response: {"type": "result", "id": str, "status": "ok",
               "val_accuracy": float}  or status "error" with "message".
    The engine sends {"type": "shutdown"} when closing.  Responses may
    arrive out of order; each candidate has its own collection timeout.
    """

    def __init__(self, command: str | Sequence[str], timeout_s: float = 600.0):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self._proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._timeout_s = timeout_s
        self._results: dict[str, EvalResult] = {}
        self._cond = threading.Condition()
        self._eof = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                if doc.get("type") != "result" or "id" not in doc:
                    raise ValueError("not a result message")
                if doc.get("status") == "ok":
                    result = EvalResult(
                        str(doc["id"]), "ok", val_accuracy=float(doc["val_accuracy"])
                    )
                else:
                    result = EvalResult(
                        str(doc["id"]), "error", message=str(doc.get("message", "unknown"))
                    )
            except (ValueError, KeyError, TypeError) as exc:
                logger.error("protocol error: %s; raw line: %r", exc, line)
                continue
            with self._cond:
                self._results[result.id] = result
                self._cond.notify_all()
        with self._cond:
            self._eof = True
            self._cond.notify_all()

    def submit(self, request: EvalRequest) -> None:
        message = {
            "type": "evaluate",
            "id": request.id,
            "epochs": request.epochs,
            "arch": request.graph_json,
        }
        try:
            assert self._proc.stdin is not None
            self._proc.stdin.write(json.dumps(message) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError):
            with self._cond:
                self._eof = True
                self._cond.notify_all()

    def collect(self, request_id: str) -> EvalResult:
        deadline = time.monotonic() + self._timeout_s
        with self._cond:
            while True:
                if request_id in self._results:
                    return self._results.pop(request_id)
                if self._eof:
                    return EvalResult(
                        request_id, "error", message="evaluator process exited"
                    )
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return EvalResult(request_id, "error", message="evaluation timed out")
                self._cond.wait(timeout=remaining)

    def close(self) -> None:
        if self._proc.stdin and not self._proc.stdin.closed:
            try:
                self._proc.stdin.write(json.dumps({"type": "shutdown"}) + "\n")
                self._proc.stdin.flush()
                self._proc.stdin.close()
            except (BrokenPipeError, ValueError, OSError):
                pass
        try:
            self._proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()
        self._reader.join(timeout=5)


def evaluate_external(
    requests: Sequence[EvalRequest], endpoint_command: str, timeout_s: float = 600.0
) -> list[EvalResult]:
    """One-shot batch evaluation through a freshly spawned endpoint process."""
    with ExternalEvaluator(endpoint_command, timeout_s=timeout_s) as evaluator:
        for request in requests:
            evaluator.submit(request)
        return [evaluator.collect(request.id) for request in requests]


def make_evaluator(spec: str, timeout_s: float = 600.0) -> Evaluator:
    """Build an evaluator from a CLI-style spec: a builtin name or extern:<cmd>."""
    if spec.startswith("extern:"):
        return ExternalEvaluator(spec[len("extern:"):], timeout_s=timeout_s)
    if spec in BUILTIN_EVALUATORS:
        return BUILTIN_EVALUATORS[spec]()
    raise ConfigurationError(
        f"unknown evaluator {spec!r}; builtins: {sorted(BUILTIN_EVALUATORS)}"
    )


# ---------------------------------------------------------------------------
# The search loop
# ---------------------------------------------------------------------------


def _materialize(genome: Genome, space: SearchSpaceConfig, assumptions: DeploymentAssumptions):
    arch = decode(genome, space)
    graph = infer_shapes(lower(arch, space), space.input_shape)
    cost = evaluate_costs(graph, assumptions)
    return arch, graph, cost


def run_search(
    space: SearchSpaceConfig,
    config: SearchConfig,
    evaluator: Evaluator,
    assumptions: DeploymentAssumptions | None = None,
) -> SearchHistory:
    """Aging evolution until the evaluation budget is exhausted.

    Deterministic for a fixed seed and a deterministic evaluator: the RNG
    stream for sampling, selection and mutation is consumed strictly
    sequentially, and in-flight evaluations are collected in submission
    order, so parallelism never changes which children are generated.
    """
    assumptions = assumptions or DeploymentAssumptions()
    max_params = config.max_params if config.max_params is not None else space.max_params
    rng = np.random.default_rng(config.seed)
    history = SearchHistory()
    population: deque[Candidate] = deque()
    ranges = {name: RunningRange() for name, _ in config.objectives}
    pending: deque[Candidate] = deque()

    def admissible(genome: Genome):
        """Returns materialized candidate parts if valid and within budget."""
        arch = decode(genome, space)
        if not validate(arch, space).valid:
            return None
        graph = infer_shapes(lower(arch, space), space.input_shape)
        cost = evaluate_costs(graph, assumptions)
        if cost.params > max_params:
            return None
        return arch, graph, cost

    def sample_admissible():
        for _ in range(SEED_SAMPLING_ATTEMPTS):
            genome = sample_genome(space, rng)
            parts = admissible(genome)
            if parts is not None:
                return genome, parts
        raise InfeasibleConstraintError(
            f"could not sample a candidate with params <= {max_params} "
            f"in {SEED_SAMPLING_ATTEMPTS} attempts"
        )

    def make_candidate(genome, parts, parent_id: str | None) -> Candidate:
        arch, graph, cost = parts
        birth = len(history) + len(pending)
        return Candidate(
            id=f"cand-{birth:06d}",
            birth_index=birth,
            parent_id=parent_id,
            genome=genome,
            arch=arch,
            graph_json=graph_to_json(graph),
            cost=cost,
            created_at=time.time(),
        )

    def dispatch(candidate: Candidate) -> None:
        evaluator.submit(
            EvalRequest(
                id=candidate.id,
                graph_json=candidate.graph_json,
                epochs=config.epochs,
                cost=candidate.cost,
            )
        )
        pending.append(candidate)

    def finalize_one() -> None:
        candidate = pending.popleft()
        result = evaluator.collect(candidate.id)
        if result.status == "ok" and result.val_accuracy is not None:
            candidate.status = "ok"
            candidate.val_accuracy = result.val_accuracy
        else:
            candidate.status = "error"
            candidate.error_message = result.message or "evaluation failed"
            logger.info("candidate %s errored: %s", candidate.id, candidate.error_message)
        history.append(candidate)
        if candidate.status == "ok":
            for name, _ in config.objectives:
                ranges[name].update(candidate.objective_values()[name])
            population.append(candidate)
            if len(population) > config.population_size:
                population.popleft()

    def select_parent() -> Candidate:
        size = min(config.tournament_size, len(population))
        members = list(population)
        picks = rng.choice(len(members), size=size, replace=False)
        weights = rng.dirichlet(np.ones(len(config.objectives)))
        best, best_score = None, -np.inf
        for index in picks:
            candidate = members[int(index)]
            score = scalarize_candidate(candidate, weights, ranges, config.objectives)
            if score > best_score:
                best, best_score = candidate, score
        assert best is not None
        return best

    budget = config.evaluation_budget
    seeds = min(config.population_size, budget)

    # Phase 1: seed the population with constraint-satisfying random samples.
    for _ in range(seeds):
        genome, parts = sample_admissible()
        dispatch(make_candidate(genome, parts, parent_id=None))
        if len(pending) >= config.parallelism:
            finalize_one()
    while pending:
        finalize_one()

    # Phase 2: tournament -> mutate -> evaluate -> evict oldest.
    while len(history) + len(pending) < budget:
        if not population and not pending:
            # Every member errored; reseed randomly to keep searching.
            genome, parts = sample_admissible()
            dispatch(make_candidate(genome, parts, parent_id=None))
        else:
            if not population:
                finalize_one()
                continue
            parent = select_parent()
            child = None
            for _ in range(CHILD_RETRY_ATTEMPTS):
                result = mutate(parent.genome, space, rng)
                parts = admissible(result.genome)
                if parts is not None:
                    child = make_candidate(result.genome, parts, parent_id=parent.id)
                    break
            if child is None:
                genome, parts = sample_admissible()
                child = make_candidate(genome, parts, parent_id=None)
            dispatch(child)
        if len(pending) >= config.parallelism:
            finalize_one()
    while pending:
        finalize_one()

    return history

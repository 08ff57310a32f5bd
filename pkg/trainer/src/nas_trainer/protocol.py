"""JSON-lines evaluator loop: one proxy training per evaluate request.

request:  {"type": "evaluate", "id": str, "epochs": int, "arch": graph JSON}
response: {"type": "result", "id": str, "status": "ok", "val_accuracy": float}
          {"type": "result", "id": str, "status": "error", "message": str}
The engine terminates the session with {"type": "shutdown"}.
"""

from __future__ import annotations

import json
import logging
import sys

from nas_trainer.data import DatasetUnavailableError
from nas_trainer.model import BuildError
from nas_trainer.train import (
    TrainConfig,
    TrainingDiverged,
    evaluate_architecture,
    load_dataset,
)

logger = logging.getLogger(__name__)


def _result(request_id: str, **fields) -> dict:
    return {"type": "result", "id": request_id, **fields}


def handle_request(doc: dict, loaded, config: TrainConfig) -> dict:
    request_id = str(doc.get("id", ""))
    epochs = doc.get("epochs", config.epochs)
    if not isinstance(epochs, int) or epochs < 1:
        return _result(request_id, status="error", message="epochs>=1")
    if "arch" not in doc:
        return _result(request_id, status="error", message="missing arch")
    try:
        _, accuracy = evaluate_architecture(doc["arch"], loaded, config, epochs=epochs)
    except BuildError as exc:
        return _result(request_id, status="error", message=f"build error: {exc}")
    except TrainingDiverged as exc:
        return _result(request_id, status="error", message=f"training diverged: {exc}")
    except (KeyError, TypeError, ValueError) as exc:
        return _result(request_id, status="error", message=f"malformed arch: {exc}")
    return _result(request_id, status="ok", val_accuracy=accuracy)


def serve_evaluator(config: TrainConfig, stdin=None, stdout=None) -> None:
    """Blocking request loop; returns on shutdown or EOF."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    try:
        loaded = load_dataset(config)
    except DatasetUnavailableError as exc:
        # Dataset problems poison every request; report and quit loudly.
        print(json.dumps({"type": "fatal", "message": str(exc)}), file=stdout, flush=True)
        raise

    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            print(
                json.dumps(_result("", status="error", message=f"malformed request: {exc}")),
                file=stdout,
                flush=True,
            )
            continue
        if doc.get("type") == "shutdown":
            logger.info("shutdown received")
            return
        if doc.get("type") != "evaluate":
            print(
                json.dumps(
                    _result(
                        str(doc.get("id", "")),
                        status="error",
                        message=f"unknown request type {doc.get('type')!r}",
                    )
                ),
                file=stdout,
                flush=True,
            )
            continue
        response = handle_request(doc, loaded, config)
        print(json.dumps(response), file=stdout, flush=True)

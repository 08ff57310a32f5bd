"""PyTorch evaluator bridge for the hybridnas search engine.

Consumes the engine's graph-JSON schema and JSON-lines wire protocol;
never imports the engine itself.

    model       -- torch modules built node-for-node from graph JSON
    data        -- CIFAR-10 binary-format loading, synthetic set generation
    train       -- proxy/full training loops
    protocol    -- the stdin/stdout evaluator loop
    onnx_export -- dependency-free ONNX serialization of trained models
    cli         -- `nas-trainer serve | retrain | make-synthetic`
"""

from nas_trainer.model import GraphNet, build_model
from nas_trainer.train import TrainConfig

__version__ = "0.1.0"

__all__ = ["GraphNet", "TrainConfig", "build_model"]

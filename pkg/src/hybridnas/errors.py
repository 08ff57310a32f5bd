"""Exception types shared across the engine."""


class HybridNasError(Exception):
    """Base class for all engine errors."""


class ConfigurationError(HybridNasError):
    """A search-space or search configuration is malformed."""


class DecodeError(HybridNasError):
    """A genome is inconsistent with the search space it claims to belong to."""


class EncodeError(HybridNasError):
    """An architecture holds a parameter value outside its domain."""


class GraphStructureError(HybridNasError):
    """A network graph violates a structural invariant (cycle, bad arity)."""


class ShapeUnderflowError(HybridNasError):
    """Shape inference produced a spatial dimension below 1."""

    def __init__(self, node_id: int, op: str, message: str):
        super().__init__(f"node {node_id} ({op}): {message}")
        self.node_id = node_id
        self.op = op


class KernelError(HybridNasError):
    """A reference kernel was invoked with inconsistent shapes or produced
    non-finite values."""


class ProtocolError(HybridNasError):
    """The external evaluator sent a malformed protocol message."""

    def __init__(self, message: str, raw_line: str = ""):
        super().__init__(message)
        self.raw_line = raw_line


class InfeasibleConstraintError(HybridNasError):
    """The parameter budget rejects every sampled candidate."""

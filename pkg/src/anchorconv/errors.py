"""Exception types shared across the package."""


class AnchorConvError(Exception):
    """Base class for all errors raised by anchorconv."""


class ShapeError(AnchorConvError, ValueError):
    """Tensor shapes or extents violate an operation's contract."""


class GraphError(AnchorConvError, RuntimeError):
    """Autodiff graph misuse (backward before forward, reuse, foreign loss)."""


class SpecError(AnchorConvError, ValueError):
    """Invalid network description (fields, invariants, or config text)."""


class DataError(AnchorConvError, ValueError):
    """Dataset contents or binary record layout are invalid."""


class CheckpointError(AnchorConvError, ValueError):
    """Checkpoint bytes are malformed or incompatible with the network."""

"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InputTooShortError(ValueError):
    """Signal too short for the requested analysis."""


class InvalidInputError(ValueError):
    """Input violates a precondition (zero target, bad fraction, ...)."""


class DegenerateInputError(ValueError):
    """Input admits no meaningful solution (fewer distinct points than clusters, ...)."""


class DegenerateBatchError(RuntimeError):
    """A training batch cannot produce attractors (empty dominance selection)."""


class NumericsError(ArithmeticError):
    """Non-finite value encountered where the pipeline requires finite numbers."""


class ArtifactMismatchError(RuntimeError):
    """Checkpoint or run artifact does not match what the operation needs."""


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


class NotSupportedError(ValueError):
    """Requested mode is outside the supported envelope (e.g. too many sources)."""

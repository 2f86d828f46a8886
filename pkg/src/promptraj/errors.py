"""Error taxonomy shared across the toolkit."""


class PromptrajError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(PromptrajError):
    """Shapes do not conform for an operation."""


class NumericError(PromptrajError):
    """Non-finite values encountered where finite values are required."""


class ContractError(PromptrajError):
    """A documented precondition was violated by the caller."""


class GeometryError(PromptrajError):
    """Input does not satisfy rigid-transform invariants."""


class PipelineError(PromptrajError):
    """Episode processing failed (synchronization, interpolation, IO)."""


class ConfigError(PromptrajError):
    """Invalid or inconsistent configuration."""

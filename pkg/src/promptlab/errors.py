"""Exception types shared across the package."""


class PromptLabError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(PromptLabError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateInputError(PromptLabError, ValueError):
    """Input is mathematically degenerate (e.g. a zero vector passed to a normalizer)."""


class EvaluationError(PromptLabError, ValueError):
    """A function evaluation produced an unusable result (non-finite, empty, ...)."""


class ConfigError(PromptLabError, ValueError):
    """A configuration value violates its contract."""


class DataError(PromptLabError, ValueError):
    """A dataset cannot satisfy the requested sampling."""


class CheckpointError(PromptLabError, ValueError):
    """A checkpoint or container file is malformed."""


class InvariantError(PromptLabError, RuntimeError):
    """An internal consistency condition was violated; indicates a bug, not bad input."""


class DivergenceError(PromptLabError, RuntimeError):
    """Training produced non-finite gradients or losses."""


class AggregationError(PromptLabError, ValueError):
    """Reports with mismatched coordinates cannot be aggregated."""

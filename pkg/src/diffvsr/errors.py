"""Exception types shared across the pipeline."""


class ParameterError(ValueError):
    """A numeric parameter violates its documented bound."""


class ContractError(ValueError):
    """Inputs violate a shape/range contract of an operation."""


class ConfigurationError(ValueError):
    """Config keys, hooks or checkpoints are wired up inconsistently."""


class TrainingError(RuntimeError):
    """Training aborted (e.g. NaN loss); message references the last good checkpoint."""

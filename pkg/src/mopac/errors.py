"""Exception types shared across the package."""


class MopacError(Exception):
    """Base class for all package errors."""

    code = "mopac_error"


class ContractViolation(MopacError, ValueError):
    code = "contract_violation"


class TrainingDivergence(MopacError, FloatingPointError):
    """A loss or gradient became non-finite."""

    code = "training_divergence"


class InsufficientData(MopacError):
    code = "insufficient_data"


class EmptyBuffer(MopacError):
    code = "empty_buffer"


class EnvironmentFault(MopacError):
    code = "environment_fault"


class ConfigurationError(MopacError):
    code = "configuration_error"


class ScenarioSizeError(MopacError):
    code = "scenario_size"


class RolloutAborted(MopacError):
    """Model prediction produced non-finite values during a rollout."""

    code = "rollout_aborted"

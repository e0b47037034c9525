"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
first token of its one-line error message.
"""


class StillflowError(Exception):
    category = "error"


class ContractError(StillflowError, ValueError):
    category = "contract"


class DimensionError(ContractError):
    category = "dimension"


class SignalError(StillflowError, ValueError):
    category = "signal"


class OptimizerError(StillflowError, FloatingPointError):
    category = "optimizer"


class SolverError(StillflowError, FloatingPointError):
    category = "solver"


class TrainingError(StillflowError, FloatingPointError):
    category = "training"


class ConfigError(StillflowError, ValueError):
    category = "config"


class IngestionError(StillflowError, FileNotFoundError):
    category = "ingestion"


class CodecUnavailableError(StillflowError, RuntimeError):
    category = "environment"


class DistortionError(StillflowError, ValueError):
    category = "distortion"


class EvalError(StillflowError, ValueError):
    category = "eval"

"""Exception hierarchy shared by every module."""


class MetaPolicyError(Exception):
    pass


class ConfigError(MetaPolicyError, ValueError):
    """Invalid configuration or mismatched dimensions."""


class DomainError(MetaPolicyError, ValueError):
    """Argument outside the operation's domain (empty batch, bad index...)."""


class NumericError(MetaPolicyError, ArithmeticError):
    """Non-finite values, divergence, or failed convergence."""


class GenerationError(MetaPolicyError, RuntimeError):
    """Random system generation exceeded its resampling cap."""


class CheckpointError(MetaPolicyError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass

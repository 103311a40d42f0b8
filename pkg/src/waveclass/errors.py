"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: usage/config errors -> 1, data errors
(decode, manifest, I/O) -> 2, numerical failures -> 3.
"""


class WaveclassError(Exception):
    """Base class for all toolkit errors."""


class DecodeError(WaveclassError):
    """Malformed audio container or chunk."""


class UnsupportedFormatError(WaveclassError):
    """Valid container but an encoding outside the supported set."""


class ContractError(WaveclassError):
    """An operation was called outside its stated preconditions."""


class ShapeError(WaveclassError):
    """Tensor shapes incompatible with the requested operation."""


class ManifestError(WaveclassError):
    """Dataset directory or manifest file violates the expected layout."""


class ConfigError(WaveclassError):
    """Invalid run or training configuration."""


class OptimizerError(WaveclassError):
    """Optimizer invoked in an invalid state (e.g. missing gradient)."""


class NumericalError(WaveclassError):
    """Non-finite values encountered where finite ones are required."""


class EvaluationError(WaveclassError):
    """Evaluation input violates metric preconditions."""

"""Exception hierarchy.

Every error carries a stable ``code`` string; the CLI prints it and maps it
to an exit status, so codes must never be renamed.
"""


class CertilipError(Exception):
    code = "E_INTERNAL"
    exit_status = 1


class ShapeError(CertilipError, ValueError):
    code = "E_SHAPE"
    exit_status = 3


class NonFiniteError(CertilipError, ValueError):
    code = "E_NONFINITE"
    exit_status = 4


class OracleScaleError(CertilipError, ValueError):
    code = "E_ORACLE_SCALE"
    exit_status = 3


class DegenerateLayerError(CertilipError, RuntimeError):
    code = "E_DEGENERATE_LAYER"
    exit_status = 5


class NumericalFailureError(CertilipError, RuntimeError):
    code = "E_NUMERICAL_FAILURE"
    exit_status = 5


class IntegrationBlowupError(CertilipError, RuntimeError):
    code = "E_INTEGRATION_BLOWUP"
    exit_status = 5

    def __init__(self, message, last_valid_time=None):
        super().__init__(message)
        self.last_valid_time = last_valid_time


class ConvergenceError(CertilipError, RuntimeError):
    code = "E_NO_CONVERGENCE"
    exit_status = 5


class NonFiniteLossError(CertilipError, RuntimeError):
    code = "E_NONFINITE_LOSS"
    exit_status = 6

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UnknownLipschitzError(CertilipError, RuntimeError):
    """Raised when certifying a network whose steps were overridden."""

    code = "E_UNKNOWN_LIPSCHITZ"
    exit_status = 7


class LabelError(CertilipError, ValueError):
    code = "E_LABEL_RANGE"
    exit_status = 8


class DatasetError(CertilipError, ValueError):
    code = "E_DATASET"
    exit_status = 8


class IdxFormatError(DatasetError):
    code = "E_IDX_MAGIC"


class RaggedCSVError(DatasetError):
    code = "E_CSV_RAGGED"


class CheckpointError(CertilipError, ValueError):
    code = "E_CHECKPOINT"
    exit_status = 9


class CheckpointVersionError(CheckpointError):
    code = "E_CHECKPOINT_VERSION"


class CheckpointLengthError(CheckpointError):
    code = "E_CHECKPOINT_LENGTH"


class CheckpointChecksumError(CheckpointError):
    code = "E_CHECKPOINT_CHECKSUM"


class ConfigError(CertilipError, ValueError):
    code = "E_CONFIG"
    exit_status = 2


class UsageError(ConfigError):
    """Unknown flag or malformed command line."""

    code = "E_USAGE"

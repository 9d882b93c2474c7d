"""Exception types shared by every module.

Each error carries a short machine-readable ``code`` that the CLI prints as
``error[<code>]: <message>``.
"""

from typing import Optional


class SimulatorError(Exception):
    """Base class for all errors raised by the library."""

    code = "E_INTERNAL"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        """Render the error as a single machine-parsable line."""
        text = " ".join(self.message.split())
        return f"error[{self.code}]: {text}"


class DimensionError(SimulatorError, ValueError):
    code = "E_DIMENSION"


class ParameterError(SimulatorError, ValueError):
    code = "E_PARAMETER"


class StateError(SimulatorError, ValueError):
    code = "E_STATE"


class PlanError(SimulatorError, ValueError):
    code = "E_PLAN"


class TrainingError(SimulatorError):
    """Raised when autoencoder training diverges."""

    code = "E_TRAINING"

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ConfigError(SimulatorError, ValueError):
    """Invalid experiment configuration; ``path`` points at the offending field."""

    code = "E_CONFIG"

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class FitError(SimulatorError, ValueError):
    code = "E_FIT"


class FixtureError(SimulatorError, ValueError):
    code = "E_FIXTURE"


class ReportError(SimulatorError, ValueError):
    code = "E_REPORT"


class FitWarning(UserWarning):
    """A coefficient fit fell back to a degenerate (single-regime) answer."""

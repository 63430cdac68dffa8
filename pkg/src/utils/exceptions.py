"""Exception hierarchy shared by every layer of the package.

The CLI maps these onto process exit codes, so raise the most specific one.
"""


class FaceAdaptError(Exception):
    """Base class for all errors raised by this package"""


class DimensionError(FaceAdaptError, ValueError):
    """Tensor shapes are incompatible for the requested operation"""


class LabelError(FaceAdaptError, ValueError):
    """Class label out of range, or a hidden label was accessed"""


class UsageError(FaceAdaptError, ValueError):
    """An API was called in a way its contract does not allow"""


class NumericalError(FaceAdaptError, ArithmeticError):
    """A forward or backward pass produced NaN or Inf"""


class TrainingAborted(FaceAdaptError):
    """Training hit a non-finite loss; carries where it happened"""

    def __init__(self, loss_name: str, epoch: int, step: int, detail: str = ""):
        self.loss_name = loss_name
        self.epoch = epoch
        self.step = step
        message = f"non-finite {loss_name} at epoch {epoch}, step {step}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class FormatError(FaceAdaptError, ValueError):
    """A dataset or checkpoint file is malformed"""


class ConfigError(FaceAdaptError, ValueError):
    """Invalid configuration value or unknown configuration key"""


class DegenerateLabelError(FaceAdaptError, ValueError):
    """A probe was asked to fit labels with fewer than two classes"""

"""Exception taxonomy shared across the toolkit.

The CLI maps these onto stable exit statuses: configuration and contract
problems exit with 2, numerical blow-ups with 3.
"""


class ContractError(ValueError):
    """A caller violated a documented precondition (shape, count, range)."""


class ConfigError(ValueError):
    """Bad configuration or unreadable/malformed input data."""


class NumericError(RuntimeError):
    """A linear solve or estimator failed for numerical reasons."""


class CalibrationError(RuntimeError):
    """Input-scale calibration produced non-finite statistics."""


class DivergenceError(RuntimeError):
    """A chain left the representable range; carries the failing step index."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class TrainingError(RuntimeError):
    """Meta-training could not proceed (repeated divergence, bad loss)."""

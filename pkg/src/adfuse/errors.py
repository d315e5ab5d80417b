"""Exception types shared across the package.

The CLI maps these onto stable exit codes (see cli.py), so raise the most
specific one available.
"""


class AdfuseError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(AdfuseError, ValueError):
    """Tensor arguments have incompatible or empty shapes."""


class InvalidConfigError(AdfuseError, ValueError):
    """A configuration value is out of its declared range or inconsistent."""


class RangeError(AdfuseError, IndexError):
    """An index (e.g. a diffusion timestep) lies outside its valid range."""


class WiringError(AdfuseError, RuntimeError):
    """Model plumbing mismatch: unknown parameter, site/pyramid mismatch."""


class NonFiniteError(AdfuseError, RuntimeError):
    """A loss or model output became NaN/Inf; carries step diagnostics."""


class DataIOError(AdfuseError, OSError):
    """Dataset or checkpoint I/O failed; message includes the failing path."""


class CheckpointMismatchError(AdfuseError, ValueError):
    """Checkpoint contents do not match the model/config they are loaded into."""


class UndefinedMetricError(AdfuseError, ValueError):
    """A metric is undefined for the given inputs (e.g. empty mask)."""


class MetricRefusedError(AdfuseError, RuntimeError):
    """A metric refused to produce a score (e.g. probe below accuracy gate)."""


class BudgetMismatchError(AdfuseError, ValueError):
    """Ablation variants were not trained under identical budgets."""

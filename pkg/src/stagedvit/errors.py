"""Exception types shared across the package."""


class NonFiniteError(RuntimeError):
    """A tensor that must stay finite (activation, gradient, parameter) is not."""

    def __init__(self, where, detail=""):
        self.where = where
        msg = f"non-finite values in {where}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DataError(ValueError):
    """A dataset could not be loaded or does not satisfy its contract."""


class PlanError(ValueError):
    """An experiment plan file is malformed or inconsistent."""


class NoRecordsError(RuntimeError):
    """A table or plot selection matched no usable run records."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint archive failures."""


class CheckpointVersionError(CheckpointError):
    """The archive declares a format version this code does not read."""


class CheckpointIntegrityError(CheckpointError):
    """The archive is truncated or its contents fail the integrity check."""


class UnknownParameterError(CheckpointError):
    """A tensor path in the archive does not match any known parameter."""

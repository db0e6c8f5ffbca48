"""Exception hierarchy.

Every error carries an exit code so the command line can map failures onto
``0`` success, ``1`` usage, ``2`` data error and ``3`` infeasible configuration.
"""


class PatchBalanceError(Exception):
    exit_code = 2


class ConfigError(PatchBalanceError, ValueError):
    """Invalid or unknown configuration value."""

    exit_code = 1


class DataError(PatchBalanceError, ValueError):
    """Malformed or inconsistent input data."""


class ManifestParseError(DataError):
    def __init__(self, message, index=None):
        if index is not None:
            message = f"record {index}: {message}"
        super().__init__(message)
        self.index = index


class ReferentialIntegrityError(DataError):
    pass


class GeometryError(DataError):
    pass


class DegeneratePolygonError(GeometryError):
    pass


class NormalizationError(DataError):
    pass


class ShapeError(DataError):
    pass


class StateError(PatchBalanceError, RuntimeError):
    """An operation was called on data in the wrong lifecycle state."""


class TrainingError(DataError):
    pass


class MetricError(DataError):
    pass


class IntegrityError(DataError):
    """A recorded stage artifact no longer matches its checksum."""


class InfeasibleError(PatchBalanceError, ValueError):
    exit_code = 3


class FoldError(InfeasibleError):
    pass

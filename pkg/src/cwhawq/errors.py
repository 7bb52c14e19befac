"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CWHawqError(Exception):
    exit_code = 1


class ConfigError(CWHawqError):
    exit_code = 2


class BudgetInfeasible(CWHawqError):
    exit_code = 3


class DataFormatError(CWHawqError):
    exit_code = 4

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NumericalError(CWHawqError):
    exit_code = 5


class ShapeError(CWHawqError, ValueError):
    """Raised when a batch or tensor does not fit the layer it is fed to."""

    exit_code = 2

    def __init__(self, layer, expected, actual):
        self.layer = layer
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(
            f"layer {layer}: expected input shape {self.expected}, got {self.actual}"
        )


class StaleCacheError(CWHawqError, RuntimeError):
    pass

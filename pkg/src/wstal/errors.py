"""Exception types shared across the package."""


class WstalError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ShapeError(WstalError, ValueError):
    pass


class ConfigError(WstalError, ValueError):
    pass


class NumericError(WstalError, ArithmeticError):
    pass


class UsageError(WstalError, ValueError):
    pass


class FormatError(WstalError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class DataError(WstalError, ValueError):
    pass

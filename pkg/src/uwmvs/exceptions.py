"""Exception hierarchy shared across the package."""


class DomainError(ValueError):
    """Input outside an operation's mathematical domain (bad shape, z <= 0, ...)."""


class ParseError(ValueError):
    """Malformed file content.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NumericalError(FloatingPointError):
    """Non-finite values produced by a computation."""

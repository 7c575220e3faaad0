"""Exception types shared across the package."""


class GBPNError(Exception):
    """Base class for all errors raised by gbpn."""


class InputError(GBPNError, ValueError):
    """Invalid argument: bad shape, out-of-range id, malformed option."""


class NumericError(GBPNError, ArithmeticError):
    """A computation produced non-finite values where finiteness is required."""


class CapacityError(GBPNError):
    """Requested work exceeds a configured size guard."""


class LoadError(InputError):
    """A file on disk is missing, malformed or violates a format invariant."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)

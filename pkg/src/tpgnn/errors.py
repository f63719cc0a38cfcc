"""Exception hierarchy shared by every tpgnn module."""


class TpgnnError(Exception):
    """Base class for all errors raised by tpgnn."""


class ConfigError(TpgnnError, ValueError):
    """Invalid parameters or experiment configuration."""


class ParseError(TpgnnError, ValueError):
    """Malformed input file."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class ShapeError(TpgnnError, ValueError):
    """Operand shapes do not agree."""


class ContractViolation(TpgnnError, RuntimeError):
    """An operation was called with inputs its contract forbids."""


class CollectiveError(TpgnnError, RuntimeError):
    """Workers disagreed on the arguments of a collective call."""


class ProtocolError(CollectiveError):
    """A collective round could not complete (timeout or mismatched sequence)."""

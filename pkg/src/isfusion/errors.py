class IsfError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(IsfError, ValueError):
    """Invalid argument or configuration value."""


class ParseError(IsfError, ValueError):
    """Malformed model, grid, or config file."""

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


class ValidationError(IsfError, ValueError):
    """Data that parsed fine but violates an invariant (normalization, vocab mismatch)."""


class DecodeError(IsfError, RuntimeError):
    """Beam search could not produce any finished hypothesis."""

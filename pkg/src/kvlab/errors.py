"""Exception types shared across the package."""


class KVLabError(Exception):
    """Base class for all kvlab errors."""


class ConfigError(KVLabError, ValueError):
    """Invalid model or run configuration."""


class ShapeError(KVLabError, ValueError):
    """Incompatible matrix dimensions."""


class NumericError(KVLabError, ValueError):
    """Non-finite values where finite ones are required."""


class InputError(KVLabError, ValueError):
    """Out-of-range token ids or positions."""


class CacheError(KVLabError, ValueError):
    """Cache entry inconsistent with the pool configuration."""


class ParameterError(KVLabError, ValueError):
    """Operation parameter outside its documented domain."""


class FormatError(KVLabError, ValueError):
    """Corrupt or truncated cache file.  Carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TraceError(KVLabError, ValueError):
    """Malformed trace record.  Carries the line number when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line

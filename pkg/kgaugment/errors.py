"""Exception types raised across kgaugment."""

from __future__ import annotations


class KgAugmentError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(KgAugmentError, ValueError):
    """Shapes or extents that cannot be combined."""


class DomainError(KgAugmentError, ValueError):
    """Input outside the domain of an operation (empty input, l > N, ...)."""


class ConfigError(KgAugmentError, ValueError):
    """Invalid or inconsistent configuration."""


class TrainingError(KgAugmentError, RuntimeError):
    """Non-finite values or gradients during optimization."""


class LabelIndexError(KgAugmentError, IndexError):
    """Class label or row id outside its valid range."""


class ParseError(KgAugmentError, ValueError):
    """Malformed input file; carries the path and 1-based line number."""

    def __init__(self, message: str, path: str | None = None, line_number: int | None = None):
        self.path = path
        self.line_number = line_number
        location = ""
        if path is not None:
            location = f"{path}"
            if line_number is not None:
                location += f":{line_number}"
            location += ": "
        elif line_number is not None:
            location = f"line {line_number}: "
        super().__init__(f"{location}{message}")

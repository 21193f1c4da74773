"""Exception hierarchy shared across the package."""


class ColharError(Exception):
    """Base class for all package errors."""


class UsageError(ColharError, ValueError):
    """A function was called with arguments violating its contract."""


class ArchitectureError(ColharError, ValueError):
    """Parameter vectors or layer shapes do not match a model architecture."""


class ConfigError(ColharError, ValueError):
    """Invalid configuration (unknown key, bad type, failed validation)."""


class IngestionError(ColharError):
    """A dataset file is missing, malformed, or unusable."""


class ParseError(IngestionError):
    """A dataset cell could not be parsed."""


class PlanValidationError(ColharError, ValueError):
    """An experiment plan violates its hygiene rules."""


class ComparisonError(ColharError, ValueError):
    """Result sets cannot be compared with each other."""

"""Exception taxonomy shared across the package."""


class TokenizerError(Exception):
    """Base class; `category` feeds the CLI's categorized error messages."""

    category = "error"


class FormatError(TokenizerError):
    category = "format error"


class TruncationError(FormatError):
    category = "truncation error"


class ConfigError(TokenizerError):
    category = "config error"


class ShapeError(TokenizerError):
    category = "shape error"


class DivisibilityError(TokenizerError):
    category = "arithmetic error"


class TrainingDiverged(TokenizerError):
    category = "training diverged"

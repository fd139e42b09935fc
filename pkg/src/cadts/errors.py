"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3. Programming-contract violations (bad shapes passed to
engine primitives, misuse of a tape) raise plain ValueError/RuntimeError.
"""


class CadError(Exception):
    """Base class for operator-facing errors."""


class ConfigError(CadError):
    """Invalid configuration or command-line usage."""


class DataError(CadError):
    """Malformed input files, IO failures, or incompatible data."""


class NumericError(CadError):
    """Non-finite values encountered during training or scoring."""

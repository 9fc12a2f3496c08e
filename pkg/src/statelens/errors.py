"""Error taxonomy shared across the package.

Exit-code mapping used by the CLI: ValidationError -> 2,
BudgetError -> 3, NumericError -> 4.
"""


class StateLensError(Exception):
    pass


class ValidationError(StateLensError):
    """Bad inputs: shapes, formats, graph structure, CLI arguments."""


class BudgetError(StateLensError):
    """A resource budget (histogram memory) would be exceeded."""


class NumericError(StateLensError):
    """NaN/Inf encountered or training diverged."""

"""Error taxonomy shared across the package.

Contract violations (bad shapes, invalid configs, malformed files) and numeric
failures (non-finite values) are distinct: the CLI maps them to different exit
codes, and training loops may catch numeric errors to abort a run cleanly.
"""


class ContractError(ValueError):
    """An input violates a documented precondition."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise left the valid domain."""


class FormatError(ContractError):
    """A serialized artifact (checkpoint, manifest, image) is malformed."""


class DegenerateOffsetError(NumericError):
    """An embedding displacement collapsed to zero where a direction is needed."""


# CLI exit codes. 64 matches the BSD EX_USAGE convention.
EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_NUMERIC = 2
EXIT_USAGE = 64

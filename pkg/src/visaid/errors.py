"""Shared exception types.

ValidationError marks bad inputs or configuration (CLI exit code 1);
anything else escaping a run is treated as a runtime failure (exit code 2).
"""


class ValidationError(ValueError):
    pass

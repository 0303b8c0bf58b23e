"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to
category-coded process exit statuses.
"""

from __future__ import annotations


class LoraLabError(Exception):
    exit_code = 1


class ConfigError(LoraLabError):
    exit_code = 2


class InputError(LoraLabError):
    exit_code = 3


class DimensionError(InputError):
    pass


class EncodingError(InputError):
    pass


class ContractError(LoraLabError):
    exit_code = 4


class NumericError(LoraLabError):
    exit_code = 5


class DegenerateBatchError(NumericError):
    pass


class DataError(LoraLabError):
    exit_code = 6


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ObjectiveMismatchError(DataError):
    pass


class FormatError(LoraLabError):
    exit_code = 7


class VersionError(FormatError):
    pass


class CompatibilityError(LoraLabError):
    exit_code = 8

    def __init__(self, message: str, fields: list[str] | None = None):
        super().__init__(message)
        self.fields = list(fields or [])


class PlotError(LoraLabError):
    exit_code = 9

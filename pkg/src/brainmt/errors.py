"""Exception hierarchy shared by every brainmt module.

The CLI maps these onto exit codes, so each class carries one.
"""


class BrainMTError(Exception):
    exit_code = 2


class ConfigurationError(BrainMTError, ValueError):
    exit_code = 1


class DimensionError(BrainMTError, ValueError):
    exit_code = 2


class DataError(BrainMTError):
    exit_code = 2


class ParseError(DataError):
    pass


class BadMagicError(ParseError):
    pass


class TruncatedPayloadError(ParseError):
    pass


class DimMismatchError(ParseError):
    pass


class NumericError(BrainMTError, ArithmeticError):
    exit_code = 3

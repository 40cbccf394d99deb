"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``ConfigError`` is a usage problem (1),
everything else that derives from ``D3QEError`` is a data/format problem (2).
"""


class D3QEError(Exception):
    pass


class ConfigError(D3QEError, ValueError):
    pass


class DimensionError(D3QEError, ValueError):
    pass


class NumericError(D3QEError, ArithmeticError):
    pass


class DataError(D3QEError, ValueError):
    pass


class FeatureLookupError(D3QEError, KeyError):
    def __str__(self):
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class FormatError(D3QEError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass

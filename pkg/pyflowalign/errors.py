"""
The exceptions raised by the package.

All of them derive from ``PyflowalignError`` and additionally from the builtin exception, which describes
the kind of problem best, so that callers which only know about ``ValueError`` or ``ArithmeticError`` can
still catch them. The command line interface maps them to exit codes: validation problems exit with 1 and
numerical failures with 2.
"""
from typing import Any, Optional


class PyflowalignError(Exception):
    pass


class ConfigError(PyflowalignError, ValueError):
    """
    Raised for invalid configurations: missing keys, unknown keys, values of the wrong type, values out of
    their valid range and upstream artifacts which do not exist.
    """

    def __init__(self, message: str, key: Optional[str] = None):
        super(ConfigError, self).__init__(message)
        self.key = key


class ShapeError(PyflowalignError, ValueError):
    pass


class CheckpointError(PyflowalignError, ValueError):
    pass


class NumericalError(PyflowalignError, ArithmeticError):
    """
    Raised whenever a computation produces non-finite values or diverges.

    The ``location`` attribute identifies where this happened. Depending on the origin this is a tape node
    id, an integrator step index, a training round or a time value.
    """

    def __init__(self, message: str, location: Any = None):
        super(NumericalError, self).__init__(message)
        self.location = location

"""Exception types shared by every module.

Each exception carries a stable ``kind`` string (the class name) and an
``exit_code`` used by the command-line front end:

* 2 -- input errors (missing files, malformed CSV, unbalanced panels)
* 3 -- numerical or solver errors
* 4 -- configuration errors
"""

from __future__ import annotations


class TripledError(Exception):
    """Base class for all package errors."""

    exit_code = 3

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    @property
    def kind(self) -> str:
        return type(self).__name__

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "message": self.message}
        if self.details:
            out["details"] = {k: _jsonable(v) for k, v in self.details.items()}
        return out


def _jsonable(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return str(value)


# -- input errors -----------------------------------------------------------

class InputError(TripledError):
    exit_code = 2


class MissingInput(InputError):
    pass


class MissingColumn(InputError):
    pass


class ParseError(InputError):
    pass


class InconsistentUnitAttribute(InputError):
    pass


class DuplicateKey(InputError):
    pass


class UnbalancedPanel(InputError):
    pass


class EmptyAfterDrop(InputError):
    pass


# -- numerical / estimation errors ------------------------------------------

class NumericalError(TripledError):
    exit_code = 3


class EmptyCell(NumericalError):
    pass


class InsufficientCell(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class CollinearDesign(NumericalError):
    pass


class DimensionMismatch(NumericalError):
    pass


class MissingCellFit(NumericalError):
    pass


class InsufficientPrePeriods(NumericalError):
    pass


class SolverNotConverged(NumericalError):
    pass


class ZeroDof(NumericalError):
    pass


class SingleCluster(NumericalError):
    pass


class TooFewControls(NumericalError):
    pass


class DegenerateResample(NumericalError):
    pass


# -- configuration errors ---------------------------------------------------

class ConfigInvalid(TripledError):
    exit_code = 4

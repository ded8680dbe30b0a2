"""Exception hierarchy. Each family maps to a CLI exit code."""


class InsoleError(Exception):
    exit_code = 1


class InputError(InsoleError):
    """Bad or malformed input data (exit code 2)."""

    exit_code = 2


class SchemaError(InputError):
    pass


class UnitError(InputError):
    pass


class EmptyFile(InputError):
    pass


class InsufficientOverlap(InputError):
    pass


class WindowTooLong(InputError):
    pass


class NonPositiveBaseline(InputError):
    pass


class InvalidVoltage(InputError):
    """Too many samples at or beyond the supply rails."""


class NumericalError(InsoleError):
    """Optimization or simulation failure (exit code 3)."""

    exit_code = 3


class DivergedOptimization(NumericalError):
    pass


class UnstableBlock(NumericalError):
    pass


class DegenerateData(InsoleError):
    """Data carries no usable information (exit code 4)."""

    exit_code = 4


class RankDeficientRegressor(DegenerateData):
    pass


class DegenerateChannel(DegenerateData):
    pass


class ConstantReference(DegenerateData):
    pass


class DegenerateNormalizer(DegenerateData):
    pass


class NoCyclesFound(DegenerateData):
    pass


class FewerThanTwoEvents(DegenerateData):
    pass

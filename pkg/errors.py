"""Exception hierarchy. Every error carries the CLI exit code it maps to."""


class MedaError(Exception):
    exit_code = 1


class ConfigError(MedaError):
    exit_code = 2


class DataError(MedaError):
    exit_code = 3


class FormatError(DataError):
    pass


class OrderingError(DataError):
    pass


class CorruptionError(DataError):
    pass


class NumericError(MedaError):
    exit_code = 4


class ShapeError(NumericError, ValueError):
    pass


class RowIndexError(NumericError, IndexError):
    pass


class MetricError(MedaError, ValueError):
    pass

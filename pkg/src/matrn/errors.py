"""Exception hierarchy shared by every matrn subsystem."""


class MatrnError(Exception):
    """Base class for all library errors."""


class DimensionError(MatrnError, ValueError):
    pass


class NumericError(MatrnError, ArithmeticError):
    pass


class UsageError(MatrnError, RuntimeError):
    pass


class LabelError(MatrnError, ValueError):
    pass


class CharsetError(MatrnError, ValueError):
    pass


class IngestionError(MatrnError, ValueError):
    pass


class ConfigError(MatrnError, ValueError):
    pass


class InputError(MatrnError, ValueError):
    pass


class CheckpointError(MatrnError, ValueError):
    pass

class DistillError(Exception):
    pass


class ConfigError(DistillError, ValueError):
    pass


class DimensionError(DistillError, ValueError):
    pass


class NumericError(DistillError, ArithmeticError):
    pass


class DataError(DistillError, ValueError):
    pass

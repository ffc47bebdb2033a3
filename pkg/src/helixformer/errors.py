"""Exception hierarchy shared across the package.

Every error carries a short ``category`` string; the command-line entry point
prints it so failures are machine-parsable.
"""


class HelixError(Exception):
    category = "error"


class DimensionError(HelixError, ValueError):
    category = "dimension"


class NumericError(HelixError, ArithmeticError):
    category = "numeric"


class PreconditionError(HelixError, ValueError):
    category = "precondition"


class ConfigurationError(HelixError, ValueError):
    category = "config"


class DataError(HelixError, ValueError):
    category = "data"


class ConsistencyError(DataError):
    category = "consistency"


class FormatError(HelixError, ValueError):
    category = "format"


class TrainingError(HelixError, RuntimeError):
    category = "training"

"""Exception hierarchy shared by every peftlab module."""


class PeftLabError(Exception):
    """Base class for all peftlab errors."""

    exit_code = 2


class DimensionError(PeftLabError, ValueError):
    pass


class ContractError(PeftLabError, ValueError):
    pass


class NumericError(PeftLabError, ArithmeticError):
    exit_code = 3


class ConfigError(PeftLabError, ValueError):
    pass


class DataError(PeftLabError, ValueError):
    pass


class StateError(PeftLabError, RuntimeError):
    pass


class BudgetError(PeftLabError, ValueError):
    pass


class CohortError(PeftLabError, ValueError):
    pass


class ReportError(PeftLabError, ValueError):
    pass


class SchemaError(PeftLabError, ValueError):
    """Experiment spec failed validation; ``path`` points at the offending node."""

    def __init__(self, message, path=()):
        self.path = tuple(path)
        where = "/".join(str(p) for p in self.path) or "<root>"
        super().__init__(f"{where}: {message}")

"""Exception hierarchy. Every error carries a short machine-greppable code."""


class UniparError(Exception):
    code = "UNIPAR"


class ShapeError(UniparError, ValueError):
    code = "SHAPE"


class ConfigurationError(UniparError, ValueError):
    code = "CONFIG"


class DataError(UniparError, ValueError):
    code = "DATA"


class RoutingError(UniparError, KeyError):
    code = "ROUTING"

    def __str__(self):
        # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ContractError(UniparError, RuntimeError):
    code = "CONTRACT"


class CorruptionError(DataError):
    code = "CORRUPT"


class IncompatibleCheckpointError(UniparError, ValueError):
    code = "INCOMPATIBLE"


class NumericalError(UniparError, FloatingPointError):
    code = "NUMERIC"

"""Exception types shared across the package."""


class DynPerceiverError(Exception):
    """Base class for all package errors."""


class ShapeError(DynPerceiverError, ValueError):
    pass


class ContractError(DynPerceiverError, ValueError):
    """A precondition of an operation was violated."""


class NumericalError(DynPerceiverError, ArithmeticError):
    pass


class ConfigError(DynPerceiverError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class BudgetError(DynPerceiverError, ValueError):
    def __init__(self, budget: float, low: float, high: float):
        super().__init__(
            f"budget {budget:.6g} outside feasible range [{low:.6g}, {high:.6g}]"
        )
        self.budget = budget
        self.low = low
        self.high = high


class FormatError(DynPerceiverError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset

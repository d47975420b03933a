from typing import Optional


class MPANetError(Exception):
    """Base class for every error raised by this project."""


class DimensionError(MPANetError, ValueError):
    pass


class ConfigError(MPANetError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ContractError(MPANetError, RuntimeError):
    pass


class DegenerateVarianceError(ContractError):
    pass


class InstabilityError(MPANetError, ArithmeticError):
    pass


class DivergenceError(MPANetError, ArithmeticError):
    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, step {step}")


class ParseError(MPANetError, ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class UndefinedMetricError(MPANetError, ValueError):
    pass

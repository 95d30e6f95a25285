"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array or parameter layout does not match what the operation expects."""


class NumericError(ArithmeticError):
    """Non-finite values entered or left a numeric routine."""


class DomainError(ValueError):
    """Argument outside the domain of an operation (empty input, bad count, ...)."""


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        # keys like "<file>" mark problems with the file itself, not one entry
        super().__init__(message if key.startswith("<") else f"config key {key!r}: {message}")
        self.key = key
        self.message = message

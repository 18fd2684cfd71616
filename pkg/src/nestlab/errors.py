"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key

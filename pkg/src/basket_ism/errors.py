"""Exception hierarchy shared by all pipeline stages."""


class BasketIsmError(Exception):
    """Base class for every error raised by this package."""


class ParseError(BasketIsmError):
    pass


class ValidationError(BasketIsmError):
    pass


class ConfigError(BasketIsmError):
    pass


class NumericalError(BasketIsmError):
    pass


class CalibrationError(BasketIsmError):
    pass


class ArbitrageError(BasketIsmError):
    pass


class LawError(BasketIsmError):
    pass


class EmptySubset(BasketIsmError):
    pass


class DegenerateSamples(BasketIsmError):
    pass


class UnsupportedPayoff(BasketIsmError):
    pass


class StateError(BasketIsmError):
    pass


class DonorInBasket(BasketIsmError):
    pass


class SizeError(BasketIsmError):
    pass


class IoError(BasketIsmError):
    pass


class StageError(BasketIsmError):
    """Failure inside one pipeline stage, tagged with stage and maturity."""

    def __init__(self, stage, message, maturity=None):
        self.stage = stage
        self.maturity = maturity
        tag = stage if maturity is None else f"{stage}@T={maturity:g}"
        super().__init__(f"[{tag}] {message}")


class ClippedMassWarning(UserWarning):
    """Negative density mass was floored while extracting a marginal law."""

"""Exception types raised across the package."""


class MambaLocError(Exception):
    pass


class ShapeMismatch(MambaLocError, ValueError):
    pass


class NonScalarLoss(MambaLocError, ValueError):
    pass


class NonFiniteValue(MambaLocError, FloatingPointError):
    pass


class NonFiniteGradient(MambaLocError, FloatingPointError):
    pass


class NondeterministicFunction(MambaLocError, RuntimeError):
    """A function handed to ``grad_check`` returned different values on repeat calls."""


class DomainError(MambaLocError, ValueError):
    pass


class ModeError(MambaLocError, ValueError):
    pass


class DegenerateQuaternion(MambaLocError, ValueError):
    pass


class NonUnitQuaternion(MambaLocError, ValueError):
    pass


class DegenerateFeature(MambaLocError, ValueError):
    pass


class EmptyDataset(MambaLocError, ValueError):
    pass


class FractionOutOfRange(MambaLocError, ValueError):
    pass


class ParseError(MambaLocError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingFeatureFile(MambaLocError, FileNotFoundError):
    pass


class BadMagic(MambaLocError, ValueError):
    pass


class ConfigError(MambaLocError, ValueError):
    pass


class NonFiniteLoss(MambaLocError, FloatingPointError):
    def __init__(self, epoch, step, value):
        self.epoch, self.step, self.value = epoch, step, value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, step {step}")

"""Exception hierarchy shared by every particle_em module."""


class ParticleEMError(Exception):
    pass


class DimensionError(ParticleEMError, ValueError):
    """An array's shape does not match the model's declared dimensions."""


class UnsupportedOperationError(ParticleEMError):
    """A model lacks a capability an algorithm needs."""


class DivergenceError(ParticleEMError):
    """A run produced non-finite (or absurdly large) values."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class SingularHessianError(ParticleEMError):
    """The summed negative θ-Hessian is not positive definite."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConfigError(ParticleEMError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class DataFormatError(ParticleEMError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class CapacityError(DataFormatError):
    pass


class InsufficientSamplesError(ParticleEMError, ValueError):
    pass


class OracleError(ParticleEMError):
    pass

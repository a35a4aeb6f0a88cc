"""Exception types raised by mfglab."""


class MfgError(Exception):
    """Base class for all library errors."""


class ModelError(MfgError, ValueError):
    """Invalid model parameters (e.g. a kinetic matrix that is not SPD)."""


class InvalidInputError(MfgError, ValueError):
    """Inputs with inconsistent shapes or out-of-range parameters."""


class ResolutionError(MfgError, ValueError):
    """A truncation box or grid is too small for the requested quantity."""


class FlowBlowUpError(MfgError, RuntimeError):
    def __init__(self, time: float, msg: str | None = None):
        self.time = float(time)
        super().__init__(msg or f"flow blew up at s={self.time:.6g}")


class ConjugatePointError(MfgError, RuntimeError):
    def __init__(self, time: float):
        self.time = float(time)
        super().__init__(f"Jacobian determinant changed sign near s={self.time:.6g}")


class InversionError(MfgError, RuntimeError):
    def __init__(self, residual: float, msg: str | None = None):
        self.residual = float(residual)
        super().__init__(msg or f"flow inversion failed, residual {self.residual:.3e}")


class OptimizationError(MfgError, RuntimeError):
    def __init__(self, grad_norm: float, iterations: int):
        self.grad_norm = float(grad_norm)
        self.iterations = int(iterations)
        super().__init__(f"minimization stopped after {iterations} iterations, |grad|={grad_norm:.3e}")


class ConfigError(MfgError, ValueError):
    """Malformed experiment configuration."""

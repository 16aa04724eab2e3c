"""Exception hierarchy shared by all solver components."""


class MfotError(Exception):
    """Base class for all package errors."""


class ConfigError(MfotError):
    """Invalid or inconsistent configuration, detected before any compute."""


class ContractError(MfotError):
    """An operation was called outside its supported domain."""


class NumericalError(MfotError):
    """A numerical computation produced non-finite or unusable values."""


class DivergedSimulation(NumericalError):
    """Particle simulation produced non-finite states."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"simulation diverged at step {step}")


class Unconverged(MfotError):
    """Iterative scheme exhausted its budget; carries the final violation."""

    def __init__(self, violation: float, iterations: int):
        self.violation = violation
        self.iterations = iterations
        super().__init__(
            f"not converged after {iterations} iterations "
            f"(marginal violation {violation:.3e})"
        )

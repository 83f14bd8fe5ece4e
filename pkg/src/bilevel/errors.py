"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """A precondition on arguments or problem structure was violated."""


class CapabilityError(ContractViolationError):
    """An optional oracle capability (dense matrices, constraints) is missing."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite reals."""


class SingularHessianError(NumericError):
    """Lower-level Hessian too ill-conditioned for a dense solve."""

    def __init__(self, message, cond=None):
        super().__init__(message)
        self.cond = cond


class ConvergenceError(RuntimeError):
    """An inner minimization failed to reach its tolerance within budget."""


class ConfigError(ValueError):
    """A run configuration file failed to parse or validate."""

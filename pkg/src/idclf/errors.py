"""Exception hierarchy shared by the package."""


class IdclfError(Exception):
    """Base class for all package errors."""


class ConfigError(IdclfError):
    """Invalid or inconsistent configuration file."""


class ModelError(IdclfError):
    """Dimension mismatch or invalid model description."""


class ConstraintRankError(ModelError):
    """Holonomic constraints are not independent at the current state."""

    def __init__(self, message, constraint=None):
        super().__init__(message)
        self.constraint = constraint


class OutputRankError(ModelError):
    """Output Jacobian or decoupling matrix lost full rank."""


class TimingError(IdclfError):
    """Non-increasing sample timestamps."""


class SolverError(IdclfError):
    """Base class for QP solver failures."""

    def __init__(self, message, x=None, residuals=None):
        super().__init__(message)
        self.x = x
        self.residuals = residuals


class Infeasible(SolverError):
    pass


class MaxIterations(SolverError):
    pass


class IllConditioned(SolverError):
    pass


class SimulationError(IdclfError):
    """Simulation aborted (divergence, constraint drift)."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state

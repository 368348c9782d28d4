"""Exception types shared across the package."""


class GovernorError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(GovernorError, ValueError):
    """An argument broke a documented precondition."""


class DivergedTrajectoryError(GovernorError):
    def __init__(self, step, message="non-finite state during propagation"):
        self.step = int(step)
        super().__init__(f"{message} (step {self.step})")


class DivergedSensitivityError(DivergedTrajectoryError):
    def __init__(self, step):
        super().__init__(step, "non-finite Jacobian or sensitivity")


class NonConvergentEquilibriumError(GovernorError):
    def __init__(self, v, steps):
        self.v = v
        self.steps = steps
        super().__init__(f"no equilibrium within {steps} steps for v={v!r}")


class MapDomainError(GovernorError):
    """Fuel-cell state left the compressor map's operating box."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class TrainingDivergedError(GovernorError):
    def __init__(self, epoch):
        self.epoch = int(epoch)
        super().__init__(f"non-finite loss at epoch {self.epoch}")


class SchemaError(GovernorError):
    pass


class CorruptFileError(GovernorError):
    pass


class TuningNonTerminationError(GovernorError):
    pass


class ConfigError(GovernorError):
    pass

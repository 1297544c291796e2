"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class DebateIVError(Exception):
    """Base class; ``module`` names the subsystem that raised it."""

    module = "debateiv"


class StructuralInputError(DebateIVError, ValueError):
    """Input records violate a structural invariant (duplicate keys, bad ranges)."""

    module = "panel"


class DegenerateBinsError(DebateIVError, ValueError):
    module = "panel"


class ConfigurationError(DebateIVError, ValueError):
    module = "config"


class PreconditionError(DebateIVError, ValueError):
    module = "dml"


class NumericalFailure(DebateIVError, RuntimeError):
    """Non-finite loss or prediction.

    ``context`` carries whatever state is useful for diagnosis (iteration,
    target name, partial training report).
    """

    module = "neural"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


class RankDeficiencyError(DebateIVError, ValueError):
    module = "linreg"

    def __init__(self, message: str, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class WeakInstrumentError(DebateIVError, ValueError):
    module = "linreg"

    def __init__(self, message: str, f_stat: float | None = None):
        super().__init__(message)
        self.f_stat = f_stat


class ConvergenceError(DebateIVError, RuntimeError):
    module = "linreg"


class SeparationError(DebateIVError, RuntimeError):
    module = "linreg"


class SimulationError(DebateIVError, ValueError):
    module = "simgen"

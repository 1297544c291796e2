"""Causal effect of reputation on debate success: panel construction, TF-IDF
text features, neural nuisance models, fixed-effects OLS/2SLS, plausibly
exogenous IV, double machine learning (PLR/PLIV) and a structural simulator.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (ConfigurationError, ConvergenceError, DebateIVError, DegenerateBinsError,  # noqa: E402
                     NumericalFailure, PreconditionError, RankDeficiencyError, SeparationError,
                     SimulationError, StructuralInputError, WeakInstrumentError)

__all__ = [
    "__version__", "ConfigurationError", "ConvergenceError", "DebateIVError", "DegenerateBinsError",
    "NumericalFailure", "PreconditionError", "RankDeficiencyError", "SeparationError",
    "SimulationError", "StructuralInputError", "WeakInstrumentError",
]

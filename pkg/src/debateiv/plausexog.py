"""Plausibly-exogenous instrument analysis.

If the instrument ``Z`` has a direct effect ``gamma`` on the outcome, the
exclusion restriction holds for ``Y - gamma * Z``. :func:`gamma_sweep`
re-estimates the IV specification on that adjusted outcome over a grid of
assumed ``gamma`` values (the "fixed-gamma union of confidence intervals"
approach); :func:`zero_crossing` finds the ``gamma`` at which the reputation
effect vanishes.

Because 2SLS is linear in the outcome, ``beta_1(gamma)`` is affine:

    beta_1(gamma) = beta_1(0) - gamma * c,

where ``c`` is the coefficient from a 2SLS regression of ``Z`` itself on
the regressors with ``Z`` as instrument. In the exactly identified case
``c = 1 / pi`` (``pi`` the first-stage coefficient), so the zero crossing
``gamma* = beta_1(0) / c`` equals the reduced-form coefficient of ``Z``.
``gamma`` is measured per raw unit of ``Z``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ConfigurationError, NumericalFailure
from .linreg import DesignSpec, FitResult, _decorate, ols_fit, prepare, tsls_fit

SWEEP_COLUMNS = ("gamma", "beta", "se", "ci_low", "ci_high")


@dataclass(frozen=True)
class GammaGrid:
    """Ascending, finite grid of assumed direct instrument effects."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ConfigurationError("gamma grid is empty")
        if not all(math.isfinite(v) for v in vals):
            raise ConfigurationError("gamma grid contains non-finite values")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigurationError("gamma grid must be strictly ascending")
        object.__setattr__(self, "values", vals)

    @classmethod
    def parse(cls, text: str) -> "GammaGrid":
        """Parse ``"a,b,c"`` or a range ``"start:stop:num"`` (inclusive, evenly spaced)."""
        text = text.strip()
        if ":" in text:
            parts = text.split(":")
            if len(parts) != 3:
                raise ConfigurationError(f"range grid must be start:stop:num, got {text!r}")
            start, stop, num = float(parts[0]), float(parts[1]), int(parts[2])
            return cls(tuple(np.linspace(start, stop, num).tolist()))
        try:
            return cls(tuple(float(v) for v in text.split(",") if v.strip()))
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse gamma grid {text!r}") from exc

    @classmethod
    def symmetric(cls, half_width: float, num: int, include_zero: bool = True) -> "GammaGrid":
        vals = np.linspace(-half_width, half_width, num)
        if include_zero and not np.any(vals == 0.0):
            vals = np.sort(np.append(vals, 0.0))
        return cls(tuple(vals.tolist()))

    def with_zero(self) -> "GammaGrid":
        return self if 0.0 in self.values else GammaGrid(tuple(sorted(self.values + (0.0,))))


@dataclass
class GammaSweep:
    """IV fits of the adjusted outcome, one per grid point."""

    spec: DesignSpec
    treatment: str
    gammas: list[float]
    fits: list[FitResult]
    reduced_form: FitResult
    level: float = 0.95

    def table(self) -> pd.DataFrame:
        rows = []
        for g, fit in zip(self.gammas, self.fits):
            i = fit.names.index(self.treatment)
            lo, hi = fit.conf_int(self.level)[i]
            rows.append((g, float(fit.coef[i]), float(fit.se[i]), float(lo), float(hi)))
        return pd.DataFrame(rows, columns=list(SWEEP_COLUMNS))

    def to_csv(self, path=None) -> str:
        """Write the ``gamma, beta, se, ci_low, ci_high`` table; returns the text."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in self.table().itertuples(index=False):
            writer.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "treatment": self.treatment, "level": self.level,
                "table": self.table().to_dict(orient="list"),
                "reduced_form": {"coef": self.reduced_form[self.spec.instruments[0]],
                                 "se": self.reduced_form.se_of(self.spec.instruments[0])},
                "fits": [f.to_dict() for f in self.fits]}


@dataclass
class ZeroCrossing:
    gamma_star: float
    intercept: float           # beta_1(0)
    slope: float               # d beta_1 / d gamma
    reduced_form: float | None = None
    reduced_form_se: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"gamma_star": self.gamma_star, "beta_at_zero": self.intercept, "slope": self.slope,
                "reduced_form": self.reduced_form, "reduced_form_se": self.reduced_form_se}


def gamma_sweep(spec: DesignSpec, panel: pd.DataFrame, grid: GammaGrid | Sequence[float],
                level: float = 0.95) -> GammaSweep:
    """2SLS of ``(Y - gamma Z)`` for every ``gamma`` in ``grid``.

    ``spec`` must have exactly one endogenous regressor and one excluded
    instrument. The sample is prepared once (filters, singleton drops, fixed
    effects absorbed), and since the within transformation is linear the
    adjusted outcome is formed directly from the demeaned columns; at
    ``gamma = 0`` this reproduces :func:`linreg.tsls` exactly.
    """
    if len(spec.endog) != 1 or len(spec.instruments) != 1:
        raise ConfigurationError("the gamma sweep needs one endogenous regressor and one instrument")
    grid = grid if isinstance(grid, GammaGrid) else GammaGrid(tuple(grid))
    prep = prepare(spec, panel)
    z = prep.instruments[:, 0]
    method = "2sls-fe" if spec.fixed_effects else "2sls"
    fits = []
    for g in grid.values:
        y_g = prep.y if g == 0.0 else prep.y - g * z
        fit = tsls_fit(y_g, prep.exog, prep.endog, prep.instruments, prep.exog_names,
                       spec.endog, spec.instruments, clusters=prep.clusters, method=method)
        fit = _decorate(fit, spec, prep)
        fit.extra["gamma"] = g
        fits.append(fit)
    rf = ols_fit(prep.y, np.column_stack([prep.instruments, prep.exog]),
                 [*spec.instruments, *prep.exog_names], clusters=prep.clusters,
                 method="reduced-form")
    rf.cluster = spec.cluster
    rf.fixed_effects = list(spec.fixed_effects)
    return GammaSweep(spec=spec, treatment=spec.endog[0], gammas=list(grid.values), fits=fits,
                      reduced_form=rf, level=level)


def zero_crossing(sweep: GammaSweep, tol: float = 1e-14) -> ZeroCrossing:
    """Solve ``beta_1(gamma*) = 0`` from the affine sweep.

    Intercept and slope come from a least-squares line through the sweep
    points (exact up to rounding, since the relation is affine); with a
    single grid point the slope is ``-1 / pi`` with ``pi`` the first-stage
    coefficient of the instrument.
    Raises :class:`NumericalFailure` when the slope is zero.
    """
    tab = sweep.table()
    g = tab["gamma"].to_numpy()
    b = tab["beta"].to_numpy()
    rf_name = sweep.spec.instruments[0]
    rf_coef = sweep.reduced_form[rf_name]
    rf_se = sweep.reduced_form.se_of(rf_name)
    if g.size >= 2:
        A = np.column_stack([np.ones_like(g), g])
        (intercept, slope), *_ = np.linalg.lstsq(A, b, rcond=None)
    else:
        first = sweep.fits[0].first_stage[sweep.treatment]
        fs = first["coef"][first["names"].index(rf_name)]
        slope = -1.0 / fs if fs != 0 else 0.0
        intercept = b[0] - slope * g[0]
    scale = max(1.0, float(np.max(np.abs(b))))
    if not abs(slope) > tol * scale:
        raise NumericalFailure("beta(gamma) has zero slope; no zero crossing", slope=float(slope))
    gamma_star = float(-intercept / slope)
    if intercept == 0.0:
        gamma_star = 0.0
    return ZeroCrossing(gamma_star=gamma_star, intercept=float(intercept), slope=float(slope),
                        reduced_form=float(rf_coef), reduced_form_se=float(rf_se))


def collinearity_residual(gammas: Sequence[float], betas: Sequence[float]) -> float:
    """Largest deviation of three or more points from their least-squares line."""
    g = np.asarray(gammas, dtype=float)
    b = np.asarray(betas, dtype=float)
    if g.size < 3:
        return 0.0
    A = np.column_stack([np.ones_like(g), g])
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    return float(np.max(np.abs(A @ coef - b)))

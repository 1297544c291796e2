"""The named estimation pipelines behind ``debateiv estimate``.

Each estimator takes a derived panel (see :func:`panel.derive`) and returns
an :class:`Estimate`: one or more table columns, each holding a
:class:`~debateiv.linreg.FitResult` plus the specification checkmarks
(text controls, instrument, fixed effects) shown under the coefficients.

Samples follow one rule: position is standardized on the sample the
estimator actually uses, after the instrument and singleton filters, and the
moments are stored in the column metadata. Conditioned variants (tree length
given success, single-party debates) keep the standardization of their
parent sample so that coefficients stay comparable across columns.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from . import dml, neural, plausexog
from .errors import ConfigurationError, DegenerateBinsError, PreconditionError
from .linreg import DesignSpec, FitResult, logit_ame, ols, tsls
from .panel import bin_quantiles, fe_sample, iv_sample, standardize

CONTROLS = ["skill", "position_std"]
MODERATORS = {"response_len": "response_text_len", "opinion_len": "opinion_text_len",
              "n_challengers": "n_challengers"}


@dataclass
class Column:
    label: str
    fit: FitResult
    checks: dict[str, bool] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"label": self.label, "fit": self.fit.to_dict(), "checks": dict(self.checks),
                "meta": self.meta}


@dataclass
class Estimate:
    estimator: str
    outcome: str
    columns: list[Column]
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "outcome": self.outcome,
                "columns": [c.to_dict() for c in self.columns], "extra": self.extra}


def _checks(text=False, instrument=False, opinion_fe=False, user_fe=False, month_fe=False) -> dict:
    return {"text": text, "instrument": instrument, "opinion_fe": opinion_fe,
            "user_fe": user_fe, "month_fe": month_fe}


def with_standardized_position(frame: pd.DataFrame, sample: str, column: str = "position_std") -> pd.DataFrame:
    """Copy of ``frame`` with ``position`` standardized on exactly these rows."""
    out = frame.copy()
    z, moments = standardize(out["position"])
    out[column] = z
    out.attrs = dict(frame.attrs)
    out.attrs["position_standardization"] = {**moments, "sample": sample}
    return out


def baseline_sample(panel: pd.DataFrame) -> pd.DataFrame:
    """All debates (the logit / pooled LPM sample)."""
    return with_standardized_position(panel.reset_index(drop=True), "baseline")


def fe_baseline_sample(panel: pd.DataFrame) -> pd.DataFrame:
    """Debates in opinions with at least two debates."""
    out, _ = fe_sample(panel)
    return with_standardized_position(out, "opinion_fe")


def iv_fe_sample(panel: pd.DataFrame) -> pd.DataFrame:
    """Defined instrument and at least two such debates per opinion (same as the DML sample)."""
    return dml.dml_sample(panel)


def _meta(frame: pd.DataFrame) -> dict:
    return {"position_standardization": frame.attrs.get("position_standardization")}


# ---------------------------------------------------------------------------
# baseline and IV columns

def baseline_logit(panel: pd.DataFrame, **_) -> Estimate:
    s = baseline_sample(panel)
    fit = logit_ame(DesignSpec("outcome", ["reputation", *CONTROLS]), s)
    return Estimate("baseline-logit", "outcome", [Column("logit", fit, _checks(), _meta(s))])


def lpm(panel: pd.DataFrame, **_) -> Estimate:
    s = baseline_sample(panel)
    fit = ols(DesignSpec("outcome", ["reputation", *CONTROLS]), s)
    return Estimate("lpm", "outcome", [Column("LPM", fit, _checks(), _meta(s))])


def lpm_fe(panel: pd.DataFrame, **_) -> Estimate:
    s = fe_baseline_sample(panel)
    fit = ols(DesignSpec("outcome", ["reputation", *CONTROLS], fixed_effects=["opinion_id"]), s)
    return Estimate("lpm-fe", "outcome", [Column("LPM + opinion FE", fit, _checks(opinion_fe=True), _meta(s))])


def iv_spec(outcome: str = "outcome", opinion_fe: bool = True, sample: str | None = None) -> DesignSpec:
    return DesignSpec(outcome, list(CONTROLS), ["reputation"], ["instrument"],
                      ["opinion_id"] if opinion_fe else [], sample=sample)


def iv(panel: pd.DataFrame, opinion_fe: bool = True, **_) -> Estimate:
    s = iv_fe_sample(panel)
    fit = tsls(iv_spec(opinion_fe=opinion_fe), s)
    return Estimate("iv", "outcome", [Column("IV", fit, _checks(instrument=True, opinion_fe=opinion_fe), _meta(s))])


def first_stage(panel: pd.DataFrame, **_) -> Estimate:
    s = iv_fe_sample(panel)
    fit = ols(DesignSpec("reputation", ["instrument", *CONTROLS], fixed_effects=["opinion_id"]), s)
    return Estimate("first-stage", "reputation",
                    [Column("first stage", fit, _checks(opinion_fe=True), _meta(s))])


def reduced_form(panel: pd.DataFrame, **_) -> Estimate:
    s = iv_fe_sample(panel)
    fit = ols(DesignSpec("outcome", ["instrument", *CONTROLS], fixed_effects=["opinion_id"]), s)
    return Estimate("reduced-form", "outcome",
                    [Column("reduced form", fit, _checks(opinion_fe=True), _meta(s))])


def main_table(panel: pd.DataFrame, text_matrix=None, seed: int = 0, **dml_options) -> Estimate:
    """Columns logit, LPM, LPM + FE, IV and (with text) DML-PLIV side by side."""
    cols = [baseline_logit(panel).columns[0], lpm(panel).columns[0], lpm_fe(panel).columns[0],
            iv(panel).columns[0]]
    if text_matrix is not None:
        cols.append(dml_estimate(panel, text_matrix, seed=seed, method="pliv", **dml_options).columns[0])
    return Estimate("main", "outcome", cols)


# ---------------------------------------------------------------------------
# DML

# Settings for desk-scale panels (a few thousand estimation-sample debates):
# without batch normalization a network starts at the target mean, and the
# larger step size lets early stopping find signal within ~1000 iterations.
DESK_DML_DEFAULTS = {"learning_rate": 1e-3, "max_iterations": 1000, "eval_every": 10,
                     "batch_norm": False}

DML_TRAIN_KEYS = {"learning_rate", "batch_size", "weight_decay", "max_iterations", "patience",
                  "eval_every", "bn_momentum"}


def dml_estimate(panel: pd.DataFrame, text_matrix, seed: int = 0, method: str = "pliv",
                 **options) -> Estimate:
    """DML-PLIV / DML-PLR on the DML sample.

    ``text_matrix`` rows align with ``panel`` rows; when ``panel`` carries a
    ``text_row`` column it is used to pick the TF-IDF rows of the sample
    (needed because sample filters renumber rows). Options: TrainConfig
    fields (``learning_rate`` ...), plus ``batch_norm``, ``hidden_width``,
    ``estimation_share``, ``absorb_opinion_fe``, ``weak_floor``, ``folds``,
    ``tune_depths``. Unset options take :data:`DESK_DML_DEFAULTS`.
    """
    options = {**DESK_DML_DEFAULTS, **options}
    unknown = set(options) - DML_TRAIN_KEYS - {"batch_norm", "hidden_width", "estimation_share",
                                               "absorb_opinion_fe", "weak_floor", "folds",
                                               "tune_depths"}
    if unknown:
        raise ConfigurationError(f"unknown DML options: {sorted(unknown)}")
    frame = panel.copy()
    if "text_row" not in frame.columns:
        if text_matrix.shape[0] != len(frame):
            raise PreconditionError("text features do not align with the panel rows")
        frame["text_row"] = np.arange(len(frame))
    s = dml.dml_sample(frame)
    X_text = text_matrix[s["text_row"].to_numpy()]
    cfg = neural.TrainConfig(**{k: options.pop(k) for k in list(options) if k in DML_TRAIN_KEYS})
    tune = options.pop("tune_depths", None)
    result, _ = dml.run(s, X_text, seed, method=method, config=cfg,
                        estimation_share=options.pop("estimation_share", 0.1),
                        absorb_opinion_fe=options.pop("absorb_opinion_fe", False),
                        weak_floor=options.pop("weak_floor", 10.0), folds=options.pop("folds", None),
                        tune_depths=tuple(tune) if tune else None, **options)
    name = f"dml-{method}"
    checks = _checks(text=True, instrument=method == "pliv", opinion_fe=True)
    meta = {**_meta(s), "split": result.split, "networks": result.networks,
            "moment_norm": result.moment_norm, "options": result.options,
            "train_config": asdict(cfg)}
    return Estimate(name, "outcome", [Column(name.upper(), result.fit, checks, meta)])


# ---------------------------------------------------------------------------
# plausibly exogenous instrument

def plausexog_estimate(panel: pd.DataFrame, gamma_grid: plausexog.GammaGrid | Sequence[float] | None = None,
                       **_) -> tuple[Estimate, plausexog.GammaSweep]:
    s = iv_fe_sample(panel)
    grid = gamma_grid if gamma_grid is not None else plausexog.GammaGrid.symmetric(4e-4, 5)
    sweep = plausexog.gamma_sweep(iv_spec(), s, grid)
    cols = [Column(f"gamma={g:g}", fit, _checks(instrument=True, opinion_fe=True), {"gamma": g})
            for g, fit in zip(sweep.gammas, sweep.fits)]
    extra = {"sweep": sweep.table().to_dict(orient="list")}
    try:
        extra["zero_crossing"] = plausexog.zero_crossing(sweep).to_dict()
    except Exception as exc:  # degenerate slope is reported, not fatal, in the table
        extra["zero_crossing"] = {"error": str(exc)}
    return Estimate("plausexog", "outcome", cols, extra), sweep


# ---------------------------------------------------------------------------
# heterogeneity

@dataclass
class HeterogeneityResult:
    fit: FitResult
    pooled: FitResult
    moderator: str
    cut_points: list[float]
    bin_counts: list[int]
    late: list[float]
    late_se: list[float]
    skill: list[float]
    effect_share: list[float]

    def to_dict(self) -> dict:
        return {"moderator": self.moderator, "cut_points": self.cut_points,
                "bin_counts": self.bin_counts, "late": self.late, "late_se": self.late_se,
                "skill": self.skill, "effect_share": self.effect_share}


def effect_share(beta_r: float, beta_s: float, reputation_scale: float = 10.0) -> float:
    """``|b_r| / (|b_r| + |b_s|)`` in report units (reputation per 10 units, skill per point)."""
    a, b = abs(beta_r * reputation_scale), abs(beta_s)
    return a / (a + b) if a + b > 0 else float("nan")


def heterogeneity(panel: pd.DataFrame, moderator: str = "response_len", bins: int = 4,
                  month_fe: bool = True, **_) -> HeterogeneityResult:
    """Per-bin reputation LATEs across quantile bins of a moderator.

    2SLS with ``reputation x 1[bin b]`` endogenous, ``instrument x 1[bin b]``
    as excluded instruments (exactly identified), ``skill x bin`` and
    ``position x bin`` as exogenous regressors and bin dummies as controls.
    Month-year fixed effects are absorbed; opinion fixed effects are not,
    since with moderators such as opinion length they would absorb the
    variation of interest.
    """
    if moderator not in MODERATORS:
        raise ConfigurationError(f"moderator must be one of {sorted(MODERATORS)}")
    column = MODERATORS[moderator]
    s = iv_fe_sample(panel)
    qb = bin_quantiles(s[column].to_numpy(dtype=float), bins)
    counts = qb.counts()
    if (counts == 0).any():
        raise DegenerateBinsError(f"empty moderator bin: counts={counts.tolist()}")
    frame = s.copy()
    endog, instr, exog = [], [], []
    for b in range(1, bins + 1):
        ind = (qb.labels == b).astype(float)
        frame[f"reputation_x_bin{b}"] = frame["reputation"] * ind
        frame[f"instrument_x_bin{b}"] = frame["instrument"] * ind
        frame[f"skill_x_bin{b}"] = frame["skill"] * ind
        frame[f"position_std_x_bin{b}"] = frame["position_std"] * ind
        endog.append(f"reputation_x_bin{b}")
        instr.append(f"instrument_x_bin{b}")
        exog += [f"skill_x_bin{b}", f"position_std_x_bin{b}"]
        if b > 1:
            frame[f"bin{b}"] = ind
            exog.append(f"bin{b}")
    fes = ["month"] if month_fe else []
    fit = tsls(DesignSpec("outcome", exog, endog, instr, fes), frame)
    pooled_exog = list(CONTROLS) + [f"bin{b}" for b in range(2, bins + 1)]
    pooled = tsls(DesignSpec("outcome", pooled_exog, ["reputation"], ["instrument"], fes), frame)
    late = [fit[f"reputation_x_bin{b}"] for b in range(1, bins + 1)]
    late_se = [fit.se_of(f"reputation_x_bin{b}") for b in range(1, bins + 1)]
    skill = [fit[f"skill_x_bin{b}"] for b in range(1, bins + 1)]
    share = [effect_share(r, k) for r, k in zip(late, skill)]
    fit.extra["moderator"] = moderator
    return HeterogeneityResult(fit=fit, pooled=pooled, moderator=moderator,
                               cut_points=qb.cut_points.tolist(), bin_counts=counts.tolist(),
                               late=late, late_se=late_se, skill=skill, effect_share=share)


def heterogeneity_estimate(panel: pd.DataFrame, moderator: str = "response_len", bins: int = 4,
                           **kw) -> Estimate:
    h = heterogeneity(panel, moderator=moderator, bins=bins, **kw)
    checks = _checks(instrument=True, month_fe=True)
    cols = [Column(f"{moderator} x bins", h.fit, checks, h.to_dict()),
            Column(f"{moderator} pooled", h.pooled, checks, {})]
    return Estimate("heterogeneity", "outcome", cols, {"heterogeneity": h.to_dict()})


# ---------------------------------------------------------------------------
# experience / participation

def experience(panel: pd.DataFrame, **_) -> Estimate:
    """Y on prior opinions challenged and position, with user and month FE."""
    s = with_standardized_position(panel.reset_index(drop=True), "experience")
    fit = ols(DesignSpec("outcome", ["experience", "position_std"], fixed_effects=["user_id", "month"],
                         cluster="user_id"), s)
    return Estimate("experience", "outcome",
                    [Column("experience", fit, _checks(user_fe=True, month_fe=True), _meta(s))])


def participation(panel: pd.DataFrame, with_instrument: bool = False, **_) -> Estimate:
    """Future participation on reputation (optionally also the instrument), user and month FE."""
    s = iv_sample(panel) if with_instrument else panel.reset_index(drop=True)
    exog = ["reputation", "instrument"] if with_instrument else ["reputation"]
    fit = ols(DesignSpec("future_participation", exog, fixed_effects=["user_id", "month"],
                         cluster="user_id"), s)
    return Estimate("participation", "future_participation",
                    [Column("participation", fit, _checks(user_fe=True, month_fe=True))])


# ---------------------------------------------------------------------------
# outcome variants

def _conditioned_iv(s: pd.DataFrame, outcome: str, query: str | None, label: str) -> Column:
    if query is not None and len(s.query(query)) == 0:
        raise PreconditionError(f"conditioned subsample is empty: {query}")
    fit = tsls(iv_spec(outcome, sample=query), s)
    return Column(label, fit, _checks(instrument=True, opinion_fe=True), {**_meta(s), "sample": query})


def tree_length(panel: pd.DataFrame, condition: str | None = None, **_) -> Estimate:
    """Conversation tree length IV: all debates, failures only, successes only.

    ``condition`` in ``{None, 'failure', 'success'}`` restricts to one column.
    """
    s = iv_fe_sample(panel)
    variants = {"all": None, "failure": "outcome == 0", "success": "outcome == 1"}
    if condition is not None:
        if condition not in ("failure", "success"):
            raise ConfigurationError("condition must be 'failure' or 'success'")
        variants = {condition: variants[condition]}
    cols = [_conditioned_iv(s, "tree_len", q, f"tree length ({k})") for k, q in variants.items()]
    return Estimate("tree-length", "tree_len", cols)


def multi_party(panel: pd.DataFrame, **_) -> Estimate:
    """IV for the multi-party indicator, and debate success in single-party debates."""
    s = iv_fe_sample(panel)
    cols = [_conditioned_iv(s, "multi_party", None, "multi-party"),
            _conditioned_iv(s, "outcome", "multi_party == 0", "success (single-party)")]
    return Estimate("multi-party", "multi_party", cols)


_SIMPLE: dict[str, Callable[..., Estimate]] = {
    "baseline-logit": baseline_logit,
    "lpm": lpm,
    "lpm-fe": lpm_fe,
    "iv": iv,
    "heterogeneity": heterogeneity_estimate,
    "first-stage": first_stage,
    "reduced-form": reduced_form,
    "experience": experience,
    "participation": participation,
    "tree-length": tree_length,
    "multi-party": multi_party,
}
ESTIMATOR_NAMES = ("baseline-logit", "lpm", "lpm-fe", "iv", "dml-plr", "dml-pliv", "plausexog",
                   "heterogeneity", "first-stage", "reduced-form", "experience", "participation",
                   "tree-length", "multi-party")


def run_estimator(name: str, panel: pd.DataFrame, text_matrix=None, seed: int = 0,
                  options: Mapping[str, Any] | None = None) -> Estimate:
    """Dispatch by estimator name; DML estimators need ``text_matrix``."""
    options = dict(options or {})
    if name not in ESTIMATOR_NAMES:
        raise ConfigurationError(f"unknown estimator {name!r}")
    if name in ("dml-plr", "dml-pliv"):
        if text_matrix is None:
            raise PreconditionError("DML estimators need text features")
        return dml_estimate(panel, text_matrix, seed=seed, method=name.split("-")[1], **options)
    if name == "plausexog":
        grid = options.pop("gamma_grid", None)
        if isinstance(grid, str):
            grid = plausexog.GammaGrid.parse(grid)
        return plausexog_estimate(panel, grid)[0]
    return _SIMPLE[name](panel, **options)

"""Double machine learning for the partially linear (IV) debate model.

Procedure (single split, the default):

1. :func:`make_split` assigns each debate to the inference sample ``S`` or
   the estimation sample ``S'`` (stratified by opinion so every opinion is in
   both), and splits ``S'`` into train/validation parts.
2. :func:`fit_nuisances` trains five networks on ``S'`` mapping
   ``[text, opinion indicator]`` to the outcome, instrument, reputation,
   skill and position.
3. :func:`residualize` subtracts eval-mode predictions on ``S``.
4. :func:`pliv_estimate` runs 2SLS of the outcome residual on the three
   treatment residuals with the instrument residual as excluded instrument
   (no intercept, clustered by opinion); :func:`plr_estimate` runs the
   residual-on-residual OLS instead.

:func:`cross_fit` is an optional K-fold extension that predicts every row
out-of-fold. ``absorb_opinion_fe=True`` additionally sweeps opinion means out
of the residuals in the final stage, which guards against opinion effects the
networks cannot learn from the few estimation-sample debates per opinion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd
import scipy.sparse as sp

from . import neural
from .errors import NumericalFailure, PreconditionError, WeakInstrumentError
from .linreg import FitResult, ols_fit, tsls_fit, within_transform
from .panel import fe_sample, iv_sample, standardize

INFERENCE, TRAIN, VALIDATION = 0, 1, 2
ROLE_NAMES = {INFERENCE: "inference", TRAIN: "train", VALIDATION: "validation"}


@dataclass(frozen=True)
class Target:
    column: str
    activation: str
    loss: str
    depth: int


def default_targets(position_column: str = "position_std") -> dict[str, Target]:
    """Nuisance targets with their output activation, loss and default depth."""
    mse = "mean_squared_error"
    return {
        "outcome": Target("outcome", "sigmoid", "binary_cross_entropy", 5),
        "instrument": Target("instrument", "rectifier", mse, 5),
        "reputation": Target("reputation", "rectifier", mse, 3),
        "skill": Target("skill", "scaled_sigmoid", mse, 3),
        "position": Target(position_column, "identity", mse, 3),
    }


TREATMENTS = ("reputation", "skill", "position")


# ---------------------------------------------------------------------------
# samples and splits

def dml_sample(panel: pd.DataFrame, position_column: str = "position_std") -> pd.DataFrame:
    """Debates usable for DML: defined instrument, opinions with >= 2 debates.

    Alternates the instrument filter and the singleton-opinion filter until
    stable, then standardizes position on the resulting sample (stored as
    ``position_column`` with the moments in ``attrs``).
    """
    out = panel
    while True:
        out = iv_sample(out)
        out, dropped = fe_sample(out)
        if dropped == 0:
            break
    out = out.copy()
    z, moments = standardize(out["position"])
    out[position_column] = z
    out.attrs["position_standardization"] = {**moments, "sample": "dml"}
    return out


@dataclass
class SplitPlan:
    role: np.ndarray
    seed: int
    estimation_share: float
    train_share: float

    @property
    def inference(self) -> np.ndarray:
        return np.flatnonzero(self.role == INFERENCE)

    @property
    def train(self) -> np.ndarray:
        return np.flatnonzero(self.role == TRAIN)

    @property
    def validation(self) -> np.ndarray:
        return np.flatnonzero(self.role == VALIDATION)

    @property
    def estimation(self) -> np.ndarray:
        return np.flatnonzero(self.role != INFERENCE)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "estimation_share": self.estimation_share,
                "train_share": self.train_share, "n_inference": int(self.inference.size),
                "n_train": int(self.train.size), "n_validation": int(self.validation.size)}


def make_split(panel: pd.DataFrame, seed: int, estimation_share: float = 0.1,
               train_share: float = 0.75, group: str = "opinion_id") -> SplitPlan:
    """Stratified random split into inference and estimation samples.

    Each opinion with ``n`` debates contributes ``n * estimation_share``
    debates to the estimation sample, randomly rounded and clamped to
    ``[1, n - 1]`` so both samples contain it. The estimation sample is then
    split uniformly at random into train/validation parts.
    """
    if not 0 < estimation_share < 1 or not 0 < train_share < 1:
        raise PreconditionError("split shares must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    codes, uniques = pd.factorize(panel[group], sort=False)
    n = codes.size
    order = np.argsort(codes, kind="stable")
    bounds = np.flatnonzero(np.diff(codes[order])) + 1
    role = np.full(n, INFERENCE, dtype=np.int8)
    for members in np.split(order, bounds):
        size = members.size
        if size < 2:
            raise PreconditionError(
                f"opinion {uniques[codes[members[0]]]!r} has a single debate; filter the panel first")
        target = size * estimation_share
        k = int(math.floor(target)) + int(rng.random() < target - math.floor(target))
        k = min(max(k, 1), size - 1)
        role[rng.permutation(members)[:k]] = TRAIN
    est = np.flatnonzero(role == TRAIN)
    if est.size < 2:
        raise PreconditionError("estimation sample needs at least two debates")
    perm = rng.permutation(est)
    n_val = min(max(1, int(round((1 - train_share) * est.size))), est.size - 1)
    role[perm[:n_val]] = VALIDATION
    return SplitPlan(role=role, seed=seed, estimation_share=estimation_share, train_share=train_share)


# ---------------------------------------------------------------------------
# nuisances

@dataclass
class Nuisance:
    target: Target
    spec: neural.MlpSpec
    params: neural.MlpParams
    report: neural.TrainReport
    config: neural.TrainConfig
    tuning: dict | None = None

    def predict(self, inputs) -> np.ndarray:
        return neural.forward(self.params, inputs, self.spec, mode="eval")


@dataclass
class NuisanceSet:
    networks: dict[str, Nuisance]

    def predict(self, inputs) -> pd.DataFrame:
        return pd.DataFrame({name: net.predict(inputs) for name, net in self.networks.items()})

    def loss_table(self, inputs, panel: pd.DataFrame, plan: SplitPlan) -> list[dict]:
        """Per-target losses on train/validation/inference (BCE or root MSE)."""
        rows = []
        X = sp.csr_matrix(inputs)
        for name, net in self.networks.items():
            y = panel[net.target.column].to_numpy(dtype=float)
            entry = {"target": name, "column": net.target.column,
                     "hidden_layers": net.spec.hidden_layers, "hidden_width": net.spec.hidden_width,
                     "output_activation": net.spec.output_activation, "loss": net.spec.loss,
                     "learning_rate": net.config.learning_rate, "batch_size": net.config.batch_size,
                     "weight_decay": net.config.weight_decay,
                     "best_iteration": net.report.best_iteration, "stopped_at": net.report.stopped_at,
                     "variance_train": float(np.var(y[plan.train]))}
            for label, idx in (("train", plan.train), ("validation", plan.validation),
                               ("inference", plan.inference)):
                if idx.size == 0:
                    entry[label] = None
                    continue
                value = neural.evaluate(net.params, X[idx], y[idx], net.spec)
                if net.spec.loss == "mean_squared_error":
                    value = math.sqrt(value)
                entry[label] = value
            rows.append(entry)
        return rows


def _seed_for(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def fit_nuisances(panel: pd.DataFrame, inputs, plan: SplitPlan,
                  config: neural.TrainConfig | Mapping[str, neural.TrainConfig] | None = None,
                  targets: Mapping[str, Target] | None = None, hidden_width: int | None = None,
                  batch_norm: bool = True,
                  tune_depths: tuple[int, ...] | None = None,
                  recalibrate: bool = True) -> NuisanceSet:
    """Train the five nuisance networks on the estimation sample.

    ``inputs`` is the sparse ``[text | opinion indicator]`` matrix aligned
    with ``panel`` rows. ``hidden_width`` defaults to the text block width,
    taken from ``panel.attrs['text_dim']`` when set. With ``tune_depths``
    the depth and weight decay are chosen by :func:`neural.tune_architecture`
    per target; otherwise the target's default depth and the configured
    weight decay are used. With ``recalibrate`` (default) the trained
    network's output bias is re-solved so its mean prediction over the
    estimation sample equals the mean target there, which removes the
    intercept drift that early-stopped networks show on unseen rows.
    """
    targets = dict(targets or default_targets())
    X = sp.csr_matrix(inputs)
    if X.shape[0] != len(panel):
        raise PreconditionError("inputs and panel have different row counts")
    tr, va = plan.train, plan.validation
    if np.intersect1d(np.concatenate([tr, va]), plan.inference).size:
        raise PreconditionError("estimation rows overlap the inference sample")
    if tr.size < 2 or va.size < 1:
        raise PreconditionError("estimation sample too small to train networks")
    width = hidden_width or int(panel.attrs.get("text_dim", 0)) or 16
    networks = {}
    for i, (name, target) in enumerate(targets.items()):
        cfg = config.get(name, neural.TrainConfig()) if isinstance(config, Mapping) else (config or neural.TrainConfig())
        cfg = cfg.replace(seed=_seed_for(plan.seed, i))
        y = panel[target.column].to_numpy(dtype=float)
        if not np.isfinite(y).all():
            raise PreconditionError(f"target {target.column!r} has missing values")
        spec = neural.MlpSpec(input_dim=X.shape[1], hidden_layers=target.depth, hidden_width=width,
                              output_activation=target.activation, loss=target.loss,
                              batch_norm=batch_norm)
        tuning = None
        if tune_depths:
            spec, lam, trace = neural.tune_architecture((X[tr], y[tr]), (X[va], y[va]), spec,
                                                        tune_depths, cfg)
            cfg = cfg.replace(weight_decay=lam)
            tuning = trace.to_dict()
        params0 = neural.init_for_target(spec, _seed_for(cfg.seed, 1), y[tr], X[tr])
        try:
            params, report = neural.train((X[tr], y[tr]), (X[va], y[va]), spec, cfg, params=params0)
        except NumericalFailure as exc:
            raise NumericalFailure(f"nuisance network {name!r}: {exc}", target=name, **exc.context) from exc
        if recalibrate and spec.use_bias:
            est = plan.estimation
            params = neural.recalibrate_output_bias(params, spec, X[est], y[est])
        networks[name] = Nuisance(target=target, spec=spec, params=params, report=report,
                                  config=cfg, tuning=tuning)
    return NuisanceSet(networks)


# ---------------------------------------------------------------------------
# residuals

RESIDUAL_COLUMNS = {"outcome": "y_res", "instrument": "z_res", "reputation": "r_res",
                    "skill": "s_res", "position": "t_res"}


def residualize_predictions(panel: pd.DataFrame, predictions: pd.DataFrame, rows: np.ndarray,
                            targets: Mapping[str, Target] | None = None,
                            group: str = "opinion_id") -> pd.DataFrame:
    """Observed minus predicted for each target on ``rows``.

    ``predictions`` has one column per target name, aligned with ``panel``.
    """
    targets = dict(targets or default_targets())
    rows = np.asarray(rows)
    out = pd.DataFrame({group: panel[group].to_numpy()[rows]})
    out["row"] = rows
    for name, target in targets.items():
        pred = np.asarray(predictions[name], dtype=float)[rows]
        bad = np.flatnonzero(~np.isfinite(pred))
        if bad.size:
            raise NumericalFailure(f"non-finite {name} prediction at panel row {int(rows[bad[0]])}",
                                   row=int(rows[bad[0]]), target=name)
        obs = panel[target.column].to_numpy(dtype=float)[rows]
        out[name] = obs
        out[f"{name}_hat"] = pred
        out[RESIDUAL_COLUMNS[name]] = obs - pred
    return out


def residualize(panel: pd.DataFrame, inputs, plan: SplitPlan, nuisances: NuisanceSet) -> pd.DataFrame:
    """Residuals on the inference sample from eval-mode network predictions."""
    X = sp.csr_matrix(inputs)[plan.inference]
    preds = nuisances.predict(X)
    full = pd.DataFrame(np.nan, index=range(len(panel)), columns=preds.columns)
    full.iloc[plan.inference] = preds.to_numpy()
    targets = {k: n.target for k, n in nuisances.networks.items()}
    return residualize_predictions(panel, full, plan.inference, targets)


# ---------------------------------------------------------------------------
# final stage

@dataclass
class DmlResult:
    method: str
    fit: FitResult
    moment_norm: float
    n_inference: int
    split: dict = field(default_factory=dict)
    networks: list[dict] = field(default_factory=list)
    options: dict = field(default_factory=dict)

    @property
    def theta(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(self.fit.names, self.fit.coef)}

    def to_dict(self) -> dict:
        return {"method": self.method, "theta": self.theta, "fit": self.fit.to_dict(),
                "moment_norm": self.moment_norm, "n_inference": self.n_inference,
                "split": self.split, "networks": self.networks, "options": self.options}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _final_arrays(res: pd.DataFrame, absorb_opinion_fe: bool, group: str):
    cols = ["y_res", "r_res", "s_res", "t_res", "z_res"]
    arr = res[cols].to_numpy(dtype=float)
    if absorb_opinion_fe:
        arr = within_transform(arr, [res[group].to_numpy()]).values
    return arr[:, 0], arr[:, 1], arr[:, 2:4], arr[:, 4]


def pliv_estimate(residuals: pd.DataFrame, absorb_opinion_fe: bool = False,
                  weak_floor: float = 10.0, group: str = "opinion_id",
                  robust_f: bool = True) -> DmlResult:
    """Orthogonalized 2SLS: ``y_res`` on ``(r_res, s_res, t_res)``, ``z_res`` instrumenting ``r_res``.

    Raises :class:`WeakInstrumentError` when the first-stage F statistic of
    the instrument residual (cluster-robust by default) is below
    ``weak_floor``.
    """
    if len(residuals) == 0:
        raise PreconditionError("empty residual panel")
    y, r, st, z = _final_arrays(residuals, absorb_opinion_fe, group)
    if not np.var(z) > 0:
        raise PreconditionError("instrument residual has no variation")
    fit = tsls_fit(y, st, r, z, ["skill", "position"], ["reputation"], ["instrument"],
                   clusters=residuals[group].to_numpy(), method="dml-pliv")
    fs = fit.first_stage["reputation"]
    f_stat = fs["f_robust"] if robust_f else fs["f_classical"]
    if not f_stat >= weak_floor:
        raise WeakInstrumentError(
            f"residualized instrument is weak: first-stage F = {f_stat:.2f} < {weak_floor}", f_stat=f_stat)
    fit.cluster = group
    moment = np.asarray(fit.extra["moment"])
    return DmlResult(method="dml-pliv", fit=fit, moment_norm=float(np.max(np.abs(moment))),
                     n_inference=len(residuals),
                     options={"absorb_opinion_fe": absorb_opinion_fe, "weak_floor": weak_floor,
                              "robust_f": robust_f})


def plr_estimate(residuals: pd.DataFrame, absorb_opinion_fe: bool = False,
                 group: str = "opinion_id") -> DmlResult:
    """Residual-on-residual OLS of ``y_res`` on ``(r_res, s_res, t_res)``."""
    if len(residuals) == 0:
        raise PreconditionError("empty residual panel")
    y, r, st, _ = _final_arrays(residuals, absorb_opinion_fe, group)
    X = np.column_stack([r, st])
    fit = ols_fit(y, X, ["reputation", "skill", "position"], clusters=residuals[group].to_numpy(),
                  method="dml-plr")
    fit.cluster = group
    e = y - X @ fit.coef
    moment = X.T @ e / y.size
    return DmlResult(method="dml-plr", fit=fit, moment_norm=float(np.max(np.abs(moment))),
                     n_inference=len(residuals), options={"absorb_opinion_fe": absorb_opinion_fe})


# ---------------------------------------------------------------------------
# cross-fitting (extension)

def cross_fit(panel: pd.DataFrame, inputs, seed: int, folds: int = 2, train_share: float = 0.75,
              group: str = "opinion_id", **fit_kwargs) -> tuple[pd.DataFrame, list[NuisanceSet]]:
    """K-fold cross-fitting: every row is residualized by networks not trained on it.

    Folds are assigned within each opinion by a random permutation, so each
    opinion with at least ``folds`` debates appears in every fold.
    """
    if folds < 2:
        raise PreconditionError("cross-fitting needs at least two folds")
    rng = np.random.default_rng(seed)
    codes, _ = pd.factorize(panel[group], sort=False)
    fold = np.empty(codes.size, dtype=np.int64)
    order = np.argsort(codes, kind="stable")
    bounds = np.flatnonzero(np.diff(codes[order])) + 1
    for members in np.split(order, bounds):
        offset = int(rng.integers(folds))
        fold[rng.permutation(members)] = (np.arange(members.size) + offset) % folds
    X = sp.csr_matrix(inputs)
    preds = None
    sets = []
    targets = fit_kwargs.get("targets")
    for k in range(folds):
        held = np.flatnonzero(fold == k)
        est = rng.permutation(np.flatnonzero(fold != k))
        n_val = max(1, int(round((1 - train_share) * est.size)))
        plan = SplitPlan(role=np.where(fold == k, INFERENCE, TRAIN).astype(np.int8), seed=_seed_for(seed, 100 + k),
                         estimation_share=1 - held.size / codes.size, train_share=train_share)
        plan.role[est[:n_val]] = VALIDATION
        ns = fit_nuisances(panel, X, plan, **fit_kwargs)
        sets.append(ns)
        p = ns.predict(X[held])
        if preds is None:
            preds = pd.DataFrame(np.nan, index=range(codes.size), columns=p.columns)
        preds.iloc[held] = p.to_numpy()
    residuals = residualize_predictions(panel, preds, np.arange(codes.size), targets, group)
    residuals["fold"] = fold
    return residuals, sets


# ---------------------------------------------------------------------------
# diagnostics

def bias_diagnostic(residuals: pd.DataFrame, oracle: pd.DataFrame | None, result: DmlResult,
                    truth: Mapping[str, float] | None = None,
                    absorb_opinion_fe: bool | None = None, group: str = "opinion_id") -> dict:
    """Product-of-errors term and a naive plug-in estimate for comparison.

    ``oracle`` holds the true nuisance values (columns as target names) on
    the residual rows, in the same order. The product term for treatment or
    instrument ``j`` is ``sqrt(n) * mean((m_j - m_hat_j) * (l - l_hat))``.

    The naive estimate plugs ``g_hat = l_hat - theta_hat' m_hat`` into the
    non-orthogonal moment: 2SLS of ``Y - g_hat`` on the raw treatments with
    the raw instrument.
    """
    if oracle is None:
        raise PreconditionError("bias diagnostic needs the true nuisance functions (simulation only)")
    n = len(residuals)
    if len(oracle) != n:
        raise PreconditionError("oracle rows do not match the residual panel")
    l_err = np.asarray(oracle["outcome"], dtype=float) - residuals["outcome_hat"].to_numpy()
    product = {}
    for name in ("reputation", "skill", "position", "instrument"):
        m_err = np.asarray(oracle[name], dtype=float) - residuals[f"{name}_hat"].to_numpy()
        product[name] = float(math.sqrt(n) * np.mean(m_err * l_err))
    theta = result.theta
    g_hat = residuals["outcome_hat"].to_numpy() - sum(
        theta[t] * residuals[f"{t}_hat"].to_numpy() for t in TREATMENTS)
    absorb = result.options.get("absorb_opinion_fe", False) if absorb_opinion_fe is None else absorb_opinion_fe
    arr = np.column_stack([residuals["outcome"].to_numpy() - g_hat,
                           residuals[["reputation", "skill", "position", "instrument"]].to_numpy(dtype=float)])
    if absorb:
        arr = within_transform(arr, [residuals[group].to_numpy()]).values
    naive = tsls_fit(arr[:, 0], arr[:, 2:4], arr[:, 1], arr[:, 4], ["skill", "position"],
                     ["reputation"], ["instrument"], clusters=residuals[group].to_numpy(),
                     method="naive-plugin")
    out = {"n": n, "product_terms": product,
           "orthogonal": {k: float(v) for k, v in theta.items()},
           "naive": {k: float(v) for k, v in zip(naive.names, naive.coef)},
           "naive_se": {k: float(v) for k, v in zip(naive.names, naive.se)}}
    if truth is not None:
        out["truth"] = dict(truth)
        out["orthogonal_bias"] = {k: out["orthogonal"][k] - truth[k] for k in truth if k in theta}
        out["naive_bias"] = {k: out["naive"][k] - truth[k] for k in truth if k in out["naive"]}
    return out


# ---------------------------------------------------------------------------
# convenience pipeline

def build_inputs(panel: pd.DataFrame, text_matrix: sp.spmatrix, group: str = "opinion_id") -> sp.csr_matrix:
    """``[text | opinion one-hot]`` for the panel rows (text already aligned)."""
    from .textfeat import assemble_inputs

    codes, uniques = pd.factorize(panel[group], sort=False)
    return assemble_inputs(text_matrix, codes, len(uniques))


def run(panel: pd.DataFrame, text_matrix: sp.spmatrix, seed: int, method: str = "pliv",
        config: neural.TrainConfig | Mapping[str, neural.TrainConfig] | None = None,
        estimation_share: float = 0.1, absorb_opinion_fe: bool = False, weak_floor: float = 10.0,
        folds: int | None = None, **fit_kwargs) -> tuple[DmlResult, pd.DataFrame]:
    """Full DML pipeline on a DML-ready panel (see :func:`dml_sample`).

    ``text_matrix`` holds the TF-IDF rows aligned with ``panel``. Returns the
    result and the residual panel.
    """
    if method not in ("pliv", "plr"):
        raise PreconditionError("method must be 'pliv' or 'plr'")
    X = build_inputs(panel, text_matrix)
    fit_kwargs.setdefault("hidden_width", text_matrix.shape[1])
    if folds:
        residuals, sets = cross_fit(panel, X, seed, folds=folds, config=config, **fit_kwargs)
        split = {"seed": seed, "folds": folds, "n_inference": len(residuals)}
        losses = []
    else:
        plan = make_split(panel, seed, estimation_share=estimation_share)
        nuis = fit_nuisances(panel, X, plan, config=config, **fit_kwargs)
        residuals = residualize(panel, X, plan, nuis)
        split = plan.to_dict()
        losses = nuis.loss_table(X, panel, plan)
    if method == "pliv":
        result = pliv_estimate(residuals, absorb_opinion_fe=absorb_opinion_fe, weak_floor=weak_floor)
    else:
        result = plr_estimate(residuals, absorb_opinion_fe=absorb_opinion_fe)
    result.split = split
    result.networks = losses
    result.options["position_standardization"] = panel.attrs.get("position_standardization")
    return result, residuals

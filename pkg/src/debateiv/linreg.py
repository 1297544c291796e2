"""Fixed-effects linear regression: within transformation, OLS, 2SLS, logit.

Two layers:

* array functions (:func:`ols_fit`, :func:`tsls_fit`, :func:`logit_fit`)
  operate on already-transformed design matrices and are what the DML stage
  uses on residuals;
* frame functions (:func:`ols`, :func:`tsls`, :func:`logit_ame`) take a
  :class:`DesignSpec` and a panel, handle the sample filter, missing values,
  singleton fixed-effect groups and demeaning, and then call the array layer.

Cluster-robust covariances use the CR1 correction
``G/(G-1) * (n-1)/(n-k)`` where ``k`` counts the regressors left after
absorbing fixed effects. P-values use a t reference with ``G-1`` degrees of
freedom when clustered, ``n-k`` otherwise, and the normal for logit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp
from scipy import stats

from .errors import (ConfigurationError, ConvergenceError, RankDeficiencyError,
                     SeparationError, StructuralInputError)

FE_TOL = 1e-10
FE_MAX_SWEEPS = 10_000
RANK_TOL = 1e-10


# ---------------------------------------------------------------------------
# result container

def _clean(value):
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return None if not math.isfinite(v) else v
    return value


@dataclass
class FitResult:
    """Coefficients, covariance and diagnostics of one regression."""

    method: str
    names: list[str]
    coef: np.ndarray
    vcov: np.ndarray
    n: int
    df_resid: int
    n_clusters: int | None = None
    r2: float | None = None
    r2_within: float | None = None
    dropped_singletons: int = 0
    dropped_missing: int = 0
    fixed_effects: list[str] = field(default_factory=list)
    cluster: str | None = None
    first_stage: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def stat(self) -> np.ndarray:
        se = self.se
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, self.coef / se, np.nan)

    @property
    def reference_df(self) -> float | None:
        if self.method == "logit":
            return None
        if self.n_clusters is not None:
            return float(self.n_clusters - 1)
        return float(self.df_resid)

    @property
    def pvalue(self) -> np.ndarray:
        z = np.abs(self.stat)
        df = self.reference_df
        p = 2.0 * (stats.norm.sf(z) if df is None else stats.t.sf(z, df))
        return np.clip(p, 0.0, 1.0)

    def conf_int(self, level: float = 0.95) -> np.ndarray:
        df = self.reference_df
        q = stats.norm.ppf(0.5 + level / 2) if df is None else stats.t.ppf(0.5 + level / 2, df)
        return np.column_stack([self.coef - q * self.se, self.coef + q * self.se])

    def __getitem__(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])

    def se_of(self, name: str) -> float:
        return float(self.se[self.names.index(name)])

    def to_dict(self) -> dict:
        return _clean({
            "method": self.method,
            "names": list(self.names),
            "coef": self.coef,
            "se": self.se,
            "stat": self.stat,
            "pvalue": self.pvalue,
            "vcov": self.vcov,
            "n": self.n,
            "df_resid": self.df_resid,
            "n_clusters": self.n_clusters,
            "r2": self.r2,
            "r2_within": self.r2_within,
            "dropped_singletons": self.dropped_singletons,
            "dropped_missing": self.dropped_missing,
            "fixed_effects": list(self.fixed_effects),
            "cluster": self.cluster,
            "first_stage": self.first_stage,
            "extra": self.extra,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        def arr(x):
            return np.array([np.nan if v is None else v for v in x], dtype=float)

        vcov = np.array([[np.nan if v is None else v for v in row] for row in d["vcov"]], dtype=float)
        return cls(method=d["method"], names=list(d["names"]), coef=arr(d["coef"]),
                   vcov=vcov.reshape(len(d["names"]), len(d["names"])), n=d["n"],
                   df_resid=d["df_resid"], n_clusters=d.get("n_clusters"), r2=d.get("r2"),
                   r2_within=d.get("r2_within"), dropped_singletons=d.get("dropped_singletons", 0),
                   dropped_missing=d.get("dropped_missing", 0),
                   fixed_effects=list(d.get("fixed_effects", [])), cluster=d.get("cluster"),
                   first_stage=d.get("first_stage"), extra=d.get("extra", {}))


# ---------------------------------------------------------------------------
# fixed effects

@dataclass
class Demeaned:
    values: np.ndarray
    fe_component: np.ndarray  # original minus demeaned: the absorbed part
    sweeps: int


def _codes(labels) -> tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(pd.Series(np.asarray(labels)), sort=False)
    if (codes < 0).any():
        raise StructuralInputError("fixed-effect labels must not be missing")
    return codes.astype(np.int64), len(uniques)


def _indicator(codes: np.ndarray, n_groups: int) -> sp.csr_matrix:
    n = codes.size
    return sp.csr_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, n_groups))


def _demean_once(x: np.ndarray, D: sp.csr_matrix, counts: np.ndarray) -> np.ndarray:
    means = (D.T @ x) / counts[:, None]
    return x - D @ means


def within_transform(columns, fe_groups: Sequence, tol: float = FE_TOL,
                     max_sweeps: int = FE_MAX_SWEEPS) -> Demeaned:
    """Remove one or two sets of fixed effects from ``columns``.

    One dimension is an exact group demeaning. Two dimensions use alternating
    projections until the largest change in any entry falls below ``tol``;
    exceeding ``max_sweeps`` raises :class:`ConvergenceError`.
    """
    x = np.asarray(columns, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if len(fe_groups) == 0:
        out = x.copy()
        return Demeaned(out[:, 0] if squeeze else out, np.zeros_like(out[:, 0] if squeeze else out), 0)
    if len(fe_groups) > 2:
        raise ConfigurationError("at most two fixed-effect dimensions are supported")
    mats = []
    for labels in fe_groups:
        codes, g = _codes(labels)
        if codes.size != x.shape[0]:
            raise StructuralInputError("fixed-effect labels do not match the number of rows")
        D = _indicator(codes, g)
        mats.append((D, np.bincount(codes, minlength=g).astype(float)))
    cur = x.copy()
    sweeps = 0
    if len(mats) == 1:
        cur = _demean_once(cur, *mats[0])
        sweeps = 1
    else:
        while True:
            prev = cur
            for D, counts in mats:
                cur = _demean_once(cur, D, counts)
            sweeps += 1
            if np.max(np.abs(cur - prev), initial=0.0) < tol:
                break
            if sweeps >= max_sweeps:
                raise ConvergenceError(
                    f"alternating projections did not converge in {max_sweeps} sweeps "
                    f"(last change {np.max(np.abs(cur - prev)):.3e})")
    comp = x - cur
    if squeeze:
        return Demeaned(cur[:, 0], comp[:, 0], sweeps)
    return Demeaned(cur, comp, sweeps)


def singleton_mask(fe_groups: Sequence) -> np.ndarray:
    """Rows to keep after repeatedly dropping singleton groups in any dimension."""
    if not fe_groups:
        return np.ones(0, dtype=bool)
    n = len(fe_groups[0])
    keep = np.ones(n, dtype=bool)
    arrays = [np.asarray(pd.factorize(pd.Series(np.asarray(g)))[0]) for g in fe_groups]
    while True:
        changed = False
        for codes in arrays:
            counts = np.bincount(codes[keep], minlength=codes.max() + 1 if codes.size else 0)
            single = keep & (counts[codes] == 1)
            if single.any():
                keep &= ~single
                changed = True
        if not changed:
            return keep


# ---------------------------------------------------------------------------
# linear algebra helpers

def _check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    if X.shape[1] == 0:
        return
    if X.shape[0] < X.shape[1]:
        raise RankDeficiencyError(f"{X.shape[0]} rows for {X.shape[1]} regressors", names)
    norms = np.linalg.norm(X, axis=0)
    zero = [names[j] for j in np.flatnonzero(norms == 0)]
    if zero:
        raise RankDeficiencyError(f"regressors with no variation: {zero}", zero)
    _, R, piv = sla.qr(X / norms, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int((d > RANK_TOL * d[0]).sum())
    if rank < X.shape[1]:
        bad = [names[j] for j in piv[rank:]]
        raise RankDeficiencyError(f"design matrix is rank deficient; collinear columns: {bad}", bad)


def _qr_solve(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least squares via QR; returns coefficients and (X'X)^{-1}."""
    Q, R = np.linalg.qr(X, mode="reduced")
    beta = sla.solve_triangular(R, Q.T @ y)
    Rinv = sla.solve_triangular(R, np.eye(R.shape[0]))
    return beta, Rinv @ Rinv.T


def cluster_vcov(X: np.ndarray, resid: np.ndarray, clusters, bread: np.ndarray | None = None,
                 k: int | None = None) -> np.ndarray:
    """CR1 sandwich ``B (sum_g X_g'e_g e_g'X_g) B`` with ``B = (X'X)^{-1}``.

    Scaled by ``G/(G-1) * (n-1)/(n-k)``. For 2SLS pass the projected
    regressors and the structural residuals.
    """
    X = np.asarray(X, dtype=float)
    e = np.asarray(resid, dtype=float)
    n, p = X.shape
    k = p if k is None else k
    codes, G = _codes(clusters)
    if G < 2:
        raise ConfigurationError("cluster-robust covariance needs at least two clusters")
    if bread is None:
        bread = np.linalg.inv(X.T @ X)
    scores = X * e[:, None]
    summed = np.zeros((G, p))
    np.add.at(summed, codes, scores)
    meat = summed.T @ summed
    scale = G / (G - 1) * (n - 1) / (n - k)
    V = scale * bread @ meat @ bread
    return (V + V.T) / 2.0


def _finish_vcov(X, e, clusters, bread, k, n):
    if clusters is None:
        sigma2 = float(e @ e) / (n - k)
        return sigma2 * bread, None
    codes, G = _codes(clusters)
    return cluster_vcov(X, e, codes, bread=bread, k=k), G


def wald_f(coef: np.ndarray, vcov: np.ndarray) -> float:
    """``b' V^{-1} b / q`` for a joint zero restriction."""
    coef = np.atleast_1d(coef)
    return float(coef @ np.linalg.solve(vcov, coef)) / coef.size


# ---------------------------------------------------------------------------
# array-level estimators

def ols_fit(y, X, names: Sequence[str], clusters=None, tss_y=None,
            method: str = "ols") -> FitResult:
    """OLS on an already-transformed design (no intercept is added)."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = list(names)
    n, k = X.shape
    _check_rank(X, names)
    if n <= k:
        raise RankDeficiencyError("no residual degrees of freedom", names)
    beta, bread = _qr_solve(X, y)
    e = y - X @ beta
    V, G = _finish_vcov(X, e, clusters, bread, k, n)
    ssr = float(e @ e)
    yc = y - y.mean() if tss_y is None else None
    tss = float(yc @ yc) if tss_y is None else float(tss_y)
    r2 = 1.0 - ssr / tss if tss > 0 else None
    return FitResult(method=method, names=names, coef=beta, vcov=V, n=n, df_resid=n - k,
                     n_clusters=G, r2=r2, extra={"ssr": ssr})


def _first_stage(endog: np.ndarray, exog: np.ndarray, instr: np.ndarray,
                 endog_names, instr_names, clusters, exog_names) -> tuple[dict, np.ndarray]:
    full = np.column_stack([instr, exog]) if exog.shape[1] else instr
    full_names = list(instr_names) + list(exog_names)
    _check_rank(full, full_names)
    q = instr.shape[1]
    n, k_u = full.shape
    out = {}
    fitted = np.empty_like(endog)
    Q, R = np.linalg.qr(full, mode="reduced")
    Rinv = sla.solve_triangular(R, np.eye(R.shape[0]))
    bread = Rinv @ Rinv.T
    for j, name in enumerate(endog_names):
        x = endog[:, j]
        beta = sla.solve_triangular(R, Q.T @ x)
        fitted[:, j] = full @ beta
        e = x - fitted[:, j]
        ssr_u = float(e @ e)
        if exog.shape[1]:
            b_r, _ = _qr_solve(exog, x)
            e_r = x - exog @ b_r
        else:
            e_r = x
        ssr_r = float(e_r @ e_r)
        f_classical = ((ssr_r - ssr_u) / q) / (ssr_u / (n - k_u)) if ssr_u > 0 else math.inf
        V, G = _finish_vcov(full, e, clusters, bread, k_u, n)
        try:
            f_robust = wald_f(beta[:q], V[:q, :q])
        except np.linalg.LinAlgError:
            f_robust = math.nan
        se = np.sqrt(np.clip(np.diag(V), 0, None))
        out[name] = {
            "names": full_names,
            "coef": beta.tolist(),
            "se": se.tolist(),
            "f_classical": f_classical,
            "f_robust": f_robust if clusters is not None else f_classical,
            "partial_r2": 1.0 - ssr_u / ssr_r if ssr_r > 0 else None,
        }
    return out, fitted


def tsls_fit(y, exog, endog, instruments, exog_names: Sequence[str],
             endog_names: Sequence[str], instrument_names: Sequence[str],
             clusters=None, tss_y=None, method: str = "2sls") -> FitResult:
    """Two-stage least squares on already-transformed arrays.

    Coefficients are ordered endogenous first, then exogenous.
    """
    y = np.asarray(y, dtype=float)
    n = y.size

    def _mat(a):
        a = np.asarray(a, dtype=float)
        if a.size == 0:
            return np.zeros((n, 0))
        return a[:, None] if a.ndim == 1 else a

    exog, endog, instr = _mat(exog), _mat(endog), _mat(instruments)
    if instr.shape[1] < endog.shape[1]:
        raise ConfigurationError("need at least as many instruments as endogenous regressors")
    names = list(endog_names) + list(exog_names)
    X = np.column_stack([endog, exog])
    first, fitted = _first_stage(endog, exog, instr, endog_names, instrument_names, clusters, exog_names)
    Xhat = np.column_stack([fitted, exog])
    k = X.shape[1]
    try:
        _check_rank(Xhat, names)
    except RankDeficiencyError as exc:
        raise RankDeficiencyError(f"first stage is rank deficient: {exc}", exc.columns) from exc
    beta, bread = _qr_solve(Xhat, y)
    e = y - X @ beta
    V, G = _finish_vcov(Xhat, e, clusters, bread, k, n)
    ssr = float(e @ e)
    if tss_y is None:
        yc = y - y.mean()
        tss = float(yc @ yc)
    else:
        tss = float(tss_y)
    moment = (np.column_stack([instr, exog]).T @ e) / n
    return FitResult(method=method, names=names, coef=beta, vcov=V, n=n, df_resid=n - k,
                     n_clusters=G, r2=1.0 - ssr / tss if tss > 0 else None, first_stage=first,
                     extra={"ssr": ssr, "moment": moment.tolist(),
                            "instruments": list(instrument_names)})


def logit_fit(y, X, names: Sequence[str], clusters=None, max_iter: int = 100,
              tol: float = 1e-10, separation_bound: float = 30.0) -> FitResult:
    """Logit maximum likelihood by IRLS with average marginal effects.

    ``X`` must contain an intercept column named ``const``. The returned
    coefficients are the AMEs of the non-intercept regressors; raw index
    coefficients are in ``extra``. The AME covariance is the delta-method
    transform of the (clustered) sandwich covariance of the index
    coefficients, scaled by ``G/(G-1)``.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    names = list(names)
    if "const" not in names:
        raise ConfigurationError("logit design needs an intercept column 'const'")
    if not np.isin(y, (0.0, 1.0)).all():
        raise StructuralInputError("logit outcome must be binary")
    _check_rank(X, names)
    n, k = X.shape
    beta = np.zeros(k)
    ll_prev = -math.inf
    for it in range(max_iter):
        eta = X @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        w = p * (1.0 - p)
        ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        if np.max(np.abs(eta)) > separation_bound or np.min(w) < 1e-14:
            raise SeparationError(
                f"fitted probabilities reached 0 or 1 (max |index| {np.max(np.abs(eta)):.1f}); "
                "the outcome is (quasi-)separated")
        H = X.T @ (X * w[:, None])
        step = np.linalg.solve(H, X.T @ (y - p))
        beta = beta + step
        if abs(ll - ll_prev) < tol * (1.0 + abs(ll)) and np.max(np.abs(step)) < 1e-8:
            break
        ll_prev = ll
    else:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations")
    eta = X @ beta
    p = 1.0 / (1.0 + np.exp(-eta))
    w = p * (1.0 - p)
    ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    ybar = y.mean()
    ll0 = n * (ybar * math.log(ybar) + (1 - ybar) * math.log(1 - ybar)) if 0 < ybar < 1 else 0.0
    Hinv = np.linalg.inv(X.T @ (X * w[:, None]))
    if clusters is None:
        Vb = Hinv
        G = None
    else:
        codes, G = _codes(clusters)
        if G < 2:
            raise ConfigurationError("cluster-robust covariance needs at least two clusters")
        scores = X * (y - p)[:, None]
        summed = np.zeros((G, k))
        np.add.at(summed, codes, scores)
        Vb = G / (G - 1) * Hinv @ (summed.T @ summed) @ Hinv
    keep = [j for j, nm in enumerate(names) if nm != "const"]
    mean_w = float(w.mean())
    ame = beta[keep] * mean_w
    dw = w * (1.0 - 2.0 * p)
    grad_mean_w = (X * dw[:, None]).mean(axis=0)  # d mean(w) / d beta
    J = np.outer(beta[keep], grad_mean_w)
    J[np.arange(len(keep)), keep] += mean_w
    V = J @ Vb @ J.T
    pseudo = 1.0 - ll / ll0 if ll0 != 0 else 0.0
    return FitResult(method="logit", names=[names[j] for j in keep], coef=ame, vcov=(V + V.T) / 2,
                     n=n, df_resid=n - k, n_clusters=G, r2=pseudo,
                     extra={"index_names": names, "index_coef": beta.tolist(),
                            "index_se": np.sqrt(np.diag(Vb)).tolist(), "loglik": ll,
                            "loglik_null": ll0, "pseudo_r2": pseudo, "iterations": it + 1})


# ---------------------------------------------------------------------------
# frame-level API

@dataclass
class DesignSpec:
    """What to regress on what, with which fixed effects and clusters.

    ``sample`` is a :meth:`pandas.DataFrame.query` expression applied first.
    """

    outcome: str
    exog: list[str] = field(default_factory=list)
    endog: list[str] = field(default_factory=list)
    instruments: list[str] = field(default_factory=list)
    fixed_effects: list[str] = field(default_factory=list)
    cluster: str | None = "opinion_id"
    sample: str | None = None

    def __post_init__(self):
        if len(self.instruments) < len(self.endog):
            raise ConfigurationError("instrument count must be at least the endogenous count")
        if len(self.fixed_effects) > 2:
            raise ConfigurationError("at most two fixed-effect dimensions are supported")

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "exog": list(self.exog), "endog": list(self.endog),
                "instruments": list(self.instruments), "fixed_effects": list(self.fixed_effects),
                "cluster": self.cluster, "sample": self.sample}


@dataclass
class PreparedDesign:
    y: np.ndarray
    exog: np.ndarray
    endog: np.ndarray
    instruments: np.ndarray
    exog_names: list[str]
    clusters: np.ndarray | None
    tss_y: float
    n_dropped_missing: int
    n_dropped_singletons: int
    frame: pd.DataFrame


def _column(frame: pd.DataFrame, name: str) -> np.ndarray:
    if name not in frame.columns:
        raise ConfigurationError(f"column {name!r} not in panel")
    return frame[name].to_numpy(dtype=float)


def prepare(spec: DesignSpec, panel: pd.DataFrame, intercept: bool = True) -> PreparedDesign:
    """Apply the sample filter, drop missing rows and singletons, absorb FE."""
    frame = panel.query(spec.sample) if spec.sample else panel
    used = [spec.outcome, *spec.exog, *spec.endog, *spec.instruments, *spec.fixed_effects]
    if spec.cluster:
        used.append(spec.cluster)
    missing_cols = [c for c in used if c not in frame.columns]
    if missing_cols:
        raise ConfigurationError(f"columns not in panel: {missing_cols}")
    complete = frame[used].notna().all(axis=1)
    n_missing = int((~complete).sum())
    frame = frame.loc[complete]
    n_single = 0
    if spec.fixed_effects:
        keep = singleton_mask([frame[c].to_numpy() for c in spec.fixed_effects])
        n_single = int((~keep).sum())
        frame = frame.loc[keep]
    if len(frame) == 0:
        raise StructuralInputError("estimation sample is empty")
    frame = frame.reset_index(drop=True)

    def block(cols):
        if not cols:
            return np.zeros((len(frame), 0))
        return np.column_stack([_column(frame, c) for c in cols])

    y = _column(frame, spec.outcome)
    exog, endog, instr = block(spec.exog), block(spec.endog), block(spec.instruments)
    exog_names = list(spec.exog)
    yc = y - y.mean()
    tss = float(yc @ yc)
    if spec.fixed_effects:
        groups = [frame[c].to_numpy() for c in spec.fixed_effects]
        stacked = np.column_stack([y, exog, endog, instr])
        dm = within_transform(stacked, groups).values
        y = dm[:, 0]
        a, b = 1, 1 + exog.shape[1]
        exog, endog, instr = dm[:, a:b], dm[:, b:b + endog.shape[1]], dm[:, b + endog.shape[1]:]
        y, exog, endog, instr = (np.ascontiguousarray(v) for v in (y, exog, endog, instr))
    elif intercept:
        exog = np.column_stack([exog, np.ones(len(frame))])
        exog_names.append("const")
    clusters = frame[spec.cluster].to_numpy() if spec.cluster else None
    return PreparedDesign(y=y, exog=exog, endog=endog, instruments=instr, exog_names=exog_names,
                          clusters=clusters, tss_y=tss, n_dropped_missing=n_missing,
                          n_dropped_singletons=n_single, frame=frame)


def _decorate(fit: FitResult, spec: DesignSpec, prep: PreparedDesign) -> FitResult:
    fit.dropped_missing = prep.n_dropped_missing
    fit.dropped_singletons = prep.n_dropped_singletons
    fit.fixed_effects = list(spec.fixed_effects)
    fit.cluster = spec.cluster
    fit.extra["spec"] = spec.to_dict()
    if spec.fixed_effects:
        yc = prep.y - prep.y.mean()
        tss_w = float(yc @ yc)
        fit.r2_within = 1.0 - fit.extra["ssr"] / tss_w if tss_w > 0 else None
        fit.r2 = 1.0 - fit.extra["ssr"] / prep.tss_y if prep.tss_y > 0 else None
    return fit


def ols(spec: DesignSpec, panel: pd.DataFrame) -> FitResult:
    """(Fixed-effects) OLS; an intercept is added when no FE are absorbed."""
    if spec.endog:
        raise ConfigurationError("spec has endogenous regressors; use tsls")
    prep = prepare(spec, panel)
    fit = ols_fit(prep.y, prep.exog, prep.exog_names, clusters=prep.clusters,
                  tss_y=prep.tss_y if not spec.fixed_effects else None,
                  method="ols-fe" if spec.fixed_effects else "ols")
    return _decorate(fit, spec, prep)


def tsls(spec: DesignSpec, panel: pd.DataFrame) -> FitResult:
    """(Fixed-effects) two-stage least squares with first-stage diagnostics."""
    if not spec.endog:
        raise ConfigurationError("2SLS needs at least one endogenous regressor")
    prep = prepare(spec, panel)
    fit = tsls_fit(prep.y, prep.exog, prep.endog, prep.instruments, prep.exog_names,
                   spec.endog, spec.instruments, clusters=prep.clusters,
                   method="2sls-fe" if spec.fixed_effects else "2sls")
    return _decorate(fit, spec, prep)


def logit_ame(spec: DesignSpec, panel: pd.DataFrame, **kwargs) -> FitResult:
    """Logit without fixed effects, reporting average marginal effects."""
    if spec.fixed_effects:
        raise ConfigurationError("logit does not take fixed effects")
    if spec.endog:
        raise ConfigurationError("logit does not take endogenous regressors")
    prep = prepare(spec, panel)
    fit = logit_fit(prep.y, prep.exog, prep.exog_names, clusters=prep.clusters, **kwargs)
    fit.dropped_missing = prep.n_dropped_missing
    fit.cluster = spec.cluster
    fit.extra["spec"] = spec.to_dict()
    return fit


def as_table_row(fit: FitResult) -> dict[str, Any]:
    """Flat mapping used by the report renderer."""
    return {name: (float(fit.coef[i]), float(fit.se[i]), float(fit.pvalue[i]))
            for i, name in enumerate(fit.names)}

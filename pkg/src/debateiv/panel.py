"""Debate panel construction.

A panel is a :class:`pandas.DataFrame` with one row per debate. Row order is
the global chronological order unless a ``timestamp`` column is present, in
which case rows are stably sorted by it (input order breaks ties).

Raw columns (``RECORD_COLUMNS``) come from ingestion or the simulator; derived
columns are added by :func:`derive`:

========================  =====================================================
``position``              1 + number of earlier challengers of the same opinion
``reputation``            poster and non-poster deltas earned strictly earlier
``skill``                 Laplace-smoothed lagged success rate, in percent
``instrument``            mean position over the user's earlier debates (NaN
                          when there is none)
``experience``            number of the user's earlier debates
``future_participation``  1 if the user has at least two later debates
``selection``             1 for every observed debate
``n_challengers``         number of responses to the opinion
========================  =====================================================
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DegenerateBinsError, StructuralInputError

RECORD_COLUMNS = (
    "opinion_id",
    "user_id",
    "arrival_index",
    "month",
    "outcome",
    "nonposter_deltas",
    "response_text",
    "opinion_text_len",
    "response_text_len",
    "multi_party",
    "tree_len",
    "deleted_user",
)

DERIVED_COLUMNS = (
    "position",
    "reputation",
    "skill",
    "instrument",
    "experience",
    "future_participation",
    "selection",
    "n_challengers",
)

DEFAULT_S_MU = 0.016
SMOOTHING = 2.0

_INT_COLUMNS = ("arrival_index", "outcome", "nonposter_deltas", "opinion_text_len",
                "response_text_len", "multi_party", "tree_len", "deleted_user")
_BINARY_COLUMNS = ("outcome", "multi_party", "deleted_user")


@dataclass
class ValidationReport:
    n_records: int
    n_opinions: int
    n_users: int
    n_deleted: int
    timestamp_ties: int = 0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "n_opinions": self.n_opinions,
            "n_users": self.n_users,
            "n_deleted": self.n_deleted,
            "timestamp_ties": self.timestamp_ties,
            "notes": list(self.notes),
        }


@dataclass
class QuantileBins:
    k: int
    cut_points: np.ndarray
    labels: np.ndarray

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k + 1)[1:]


# ---------------------------------------------------------------------------
# ingestion

def read_records(path: str | Path) -> pd.DataFrame:
    """Read debate records from CSV (header row) or JSON lines (``.jsonl``)."""
    path = Path(path)
    if path.suffix in (".jsonl", ".ndjson"):
        frame = pd.read_json(path, lines=True, dtype={"opinion_id": str, "user_id": str})
    else:
        frame = pd.read_csv(path, dtype={"opinion_id": str, "user_id": str, "month": str},
                            keep_default_na=False, na_values=[])
    return frame


def write_records(frame: pd.DataFrame, path: str | Path) -> None:
    path = Path(path)
    if path.suffix in (".jsonl", ".ndjson"):
        frame.to_json(path, orient="records", lines=True, force_ascii=False)
    else:
        frame.to_csv(path, index=False)


def validate_records(records: pd.DataFrame) -> tuple[pd.DataFrame, ValidationReport]:
    """Check structural invariants and return records in chronological order.

    Raises :class:`StructuralInputError` on missing columns, duplicate
    ``(opinion_id, arrival_index)`` keys, non-contiguous arrival indices,
    out-of-range binary fields, or tree lengths inconsistent with the outcome.
    """
    missing = [c for c in RECORD_COLUMNS if c not in records.columns]
    if missing:
        raise StructuralInputError(f"missing record columns: {missing}")
    frame = records.copy()
    frame["opinion_id"] = frame["opinion_id"].astype(str)
    frame["user_id"] = frame["user_id"].astype(str)
    frame["month"] = frame["month"].astype(str)
    frame["response_text"] = frame["response_text"].fillna("").astype(str)
    for col in _INT_COLUMNS:
        values = pd.to_numeric(frame[col], errors="coerce")
        if values.isna().any() or (values < 0).any() or (values % 1 != 0).any():
            raise StructuralInputError(f"column {col!r} must hold nonnegative integers")
        frame[col] = values.astype(np.int64)
    for col in _BINARY_COLUMNS:
        if not frame[col].isin((0, 1)).all():
            raise StructuralInputError(f"column {col!r} must be binary")

    ties = 0
    if "timestamp" in frame.columns:
        ties = int(frame["timestamp"].duplicated(keep=False).sum())
        frame = frame.sort_values("timestamp", kind="mergesort")
    frame = frame.reset_index(drop=True)

    dup = frame.duplicated(["opinion_id", "arrival_index"], keep=False)
    if dup.any():
        row = frame.loc[dup].iloc[0]
        raise StructuralInputError(
            f"duplicate (opinion_id, arrival_index): ({row['opinion_id']}, {int(row['arrival_index'])})")
    grouped = frame.groupby("opinion_id", sort=False)["arrival_index"]
    size = grouped.transform("size")
    if not ((grouped.transform("min") == 0) & (grouped.transform("max") == size - 1)).all():
        raise StructuralInputError("arrival_index must be contiguous from 0 within each opinion")
    # within an opinion, arrival order must agree with chronological row order
    if (grouped.diff() < 0).any():
        raise StructuralInputError("arrival_index disagrees with chronological order")

    if (frame["tree_len"] < 1).any():
        raise StructuralInputError("tree_len must be >= 1")
    if ((frame["outcome"] == 1) & (frame["tree_len"] < 2)).any():
        raise StructuralInputError("successful debates need tree_len >= 2")

    report = ValidationReport(
        n_records=len(frame),
        n_opinions=int(frame["opinion_id"].nunique()),
        n_users=int(frame["user_id"].nunique()),
        n_deleted=int(frame["deleted_user"].sum()),
        timestamp_ties=ties,
    )
    if ties:
        report.notes.append(f"{ties} records share a timestamp; input order breaks the ties")
    return frame, report


# ---------------------------------------------------------------------------
# derived variables

def compute_position(records: pd.DataFrame) -> pd.Series:
    """Position of each challenger in the opinion's response sequence (1-based)."""
    dup = records.duplicated(["opinion_id", "arrival_index"])
    if dup.any():
        raise StructuralInputError("duplicate (opinion_id, arrival_index)")
    return (records["arrival_index"].astype(np.int64) + 1).rename("position")


def standardize(values: pd.Series | np.ndarray) -> tuple[np.ndarray, dict]:
    """Center and scale to unit sample variance (ddof=1).

    Returns the standardized values and the moments used, for metadata.
    A single observation (or constant column) standardizes to zeros.
    """
    x = np.asarray(values, dtype=float)
    mean = float(x.mean())
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    z = (x - mean) / sd if sd > 0 else np.zeros_like(x)
    return z, {"mean": mean, "sd": sd, "n": int(x.size), "ddof": 1}


def _prior_sum(frame: pd.DataFrame, col: str | pd.Series) -> pd.Series:
    values = frame[col] if isinstance(col, str) else col
    by_user = values.groupby(frame["user_id"], sort=False)
    return (by_user.cumsum() - values).astype(float)


def compute_reputation(records: pd.DataFrame) -> pd.Series:
    """Deltas earned strictly before each debate (poster plus non-poster)."""
    earned = records["outcome"] + records["nonposter_deltas"]
    return _prior_sum(records, earned).astype(np.int64).rename("reputation")


def compute_experience(records: pd.DataFrame) -> pd.Series:
    return records.groupby("user_id", sort=False).cumcount().astype(np.int64).rename("experience")


def compute_skill(records: pd.DataFrame, s_mu: float = DEFAULT_S_MU) -> pd.Series:
    """Smoothed lagged persuasion rate in percent.

    ``(prior successes + 2 s_mu) / (prior debates + 2)``, times 100.
    """
    if not 0.0 < s_mu < 1.0:
        raise ValueError("s_mu must lie in (0, 1)")
    successes = _prior_sum(records, "outcome")
    debates = compute_experience(records).astype(float)
    skill = 100.0 * (successes + SMOOTHING * s_mu) / (debates + SMOOTHING)
    return skill.rename("skill")


def compute_instrument(records: pd.DataFrame, position: pd.Series | None = None) -> pd.Series:
    """Mean position over the user's strictly earlier debates; NaN for first debates."""
    if position is None:
        position = compute_position(records)
    position = position.astype(float)
    prior_total = _prior_sum(records, position)
    prior_count = compute_experience(records).astype(float)
    z = prior_total / prior_count.where(prior_count > 0)
    return z.rename("instrument")


def compute_experience_and_participation(records: pd.DataFrame) -> pd.DataFrame:
    experience = compute_experience(records)
    total = records.groupby("user_id", sort=False)["user_id"].transform("size")
    later = total - experience - 1
    return pd.DataFrame({
        "experience": experience,
        "future_participation": (later >= 2).astype(np.int64),
    })


def derive(records: pd.DataFrame, s_mu: float = DEFAULT_S_MU,
           keep_deleted: bool = False) -> pd.DataFrame:
    """Validate records and attach all derived columns.

    Positions count every earlier challenger, deleted accounts included.
    Debates by deleted users are then dropped unless ``keep_deleted``; when
    kept they carry ``reputation=0``, ``skill=100*s_mu``, no instrument and
    zero experience, since their history cannot be linked.
    """
    frame, report = validate_records(records)
    frame["position"] = compute_position(frame)
    frame["n_challengers"] = frame.groupby("opinion_id", sort=False)["opinion_id"].transform("size").astype(np.int64)

    deleted = frame["deleted_user"] == 1
    linked = frame.loc[~deleted]
    frame.loc[~deleted, "reputation"] = compute_reputation(linked)
    frame.loc[~deleted, "skill"] = compute_skill(linked, s_mu)
    frame.loc[~deleted, "instrument"] = compute_instrument(linked, linked["position"])
    part = compute_experience_and_participation(linked)
    frame.loc[~deleted, "experience"] = part["experience"]
    frame.loc[~deleted, "future_participation"] = part["future_participation"]
    frame.loc[deleted, ["reputation", "experience", "future_participation"]] = 0
    frame.loc[deleted, "skill"] = 100.0 * s_mu
    frame.loc[deleted, "instrument"] = np.nan
    for col in ("reputation", "experience", "future_participation"):
        frame[col] = frame[col].astype(np.int64)
    frame["skill"] = frame["skill"].astype(float)
    frame["instrument"] = frame["instrument"].astype(float)
    frame["selection"] = 1

    if not keep_deleted:
        frame = frame.loc[~deleted].reset_index(drop=True)
        report.notes.append(f"excluded {int(deleted.sum())} debates by deleted users")
    frame.attrs["validation"] = report.to_dict()
    frame.attrs["s_mu"] = s_mu
    return frame


# ---------------------------------------------------------------------------
# samples and bins

def fe_sample(panel: pd.DataFrame, group: str = "opinion_id") -> tuple[pd.DataFrame, int]:
    """Drop debates that are the only response to their opinion.

    Returns the filtered panel and the number of dropped rows.
    """
    size = panel.groupby(group, sort=False)[group].transform("size")
    keep = size > 1
    out = panel.loc[keep].reset_index(drop=True)
    out.attrs = dict(panel.attrs)
    dropped = int((~keep).sum())
    out.attrs["fe_dropped"] = out.attrs.get("fe_dropped", 0) + dropped
    return out, dropped


def iv_sample(panel: pd.DataFrame) -> pd.DataFrame:
    """Rows with a defined instrument (users with at least one earlier debate)."""
    out = panel.loc[panel["instrument"].notna()].reset_index(drop=True)
    out.attrs = dict(panel.attrs)
    return out


def bin_quantiles(values: Sequence[float] | np.ndarray, k: int) -> QuantileBins:
    """Split values into ``k`` bins at the empirical ``i/k`` quantiles.

    A value equal to a cut point goes to the lower bin. Raises
    :class:`DegenerateBinsError` for constant input or when ties leave a bin
    empty.
    """
    x = np.asarray(values, dtype=float)
    if k < 2:
        raise ValueError("k must be at least 2")
    if x.size < k:
        raise ValueError("need at least k observations")
    if np.all(x == x[0]):
        raise DegenerateBinsError("constant vector cannot be binned")
    cuts = np.quantile(x, np.arange(1, k) / k)
    labels = 1 + np.searchsorted(cuts, x, side="left")
    bins = QuantileBins(k=k, cut_points=cuts, labels=labels.astype(np.int64))
    if (bins.counts() == 0).any():
        raise DegenerateBinsError(f"ties leave empty bins: counts={bins.counts().tolist()}")
    return bins


# ---------------------------------------------------------------------------
# descriptive report

DESCRIBE_VARIABLES = ("reputation", "skill", "position", "instrument", "experience")


def _corr(a: np.ndarray, b: np.ndarray) -> float | None:
    mask = ~(np.isnan(a) | np.isnan(b))
    a, b = a[mask], b[mask]
    if a.size < 2:
        return None
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return None
    return float(da @ db) / denom


def describe(panel: pd.DataFrame) -> dict:
    """Descriptive statistics in the layout of the classic summary table.

    Correlations use pairwise-complete rows; constant columns yield ``None``.
    """
    stats = {}
    for col in DESCRIBE_VARIABLES:
        x = panel[col].astype(float).dropna()
        stats[col] = {
            "mean": float(x.mean()) if len(x) else None,
            "sd": float(x.std(ddof=1)) if len(x) > 1 else None,
            "median": float(x.median()) if len(x) else None,
            "n": int(len(x)),
        }
    per_opinion = panel.groupby("opinion_id", sort=False)
    debates_per_opinion = per_opinion.size()
    successes_per_opinion = per_opinion["outcome"].sum()
    per_user = panel.groupby("user_id", sort=False)
    debates_per_user = per_user.size()

    def _dist(s: pd.Series) -> dict:
        return {"mean": float(s.mean()), "sd": float(s.std(ddof=1)) if len(s) > 1 else None,
                "median": float(s.median())}

    counts = {
        "opinions": int(len(debates_per_opinion)),
        "opinions_conceded": int((successes_per_opinion > 0).sum()),
        "opinions_multi_response": int((debates_per_opinion > 1).sum()),
        "debates": int(len(panel)),
        "successful_debates": int(panel["outcome"].sum()),
        "multi_party_debates": int(panel["multi_party"].sum()),
        "challengers": int(len(debates_per_user)),
        "challengers_multi_debate": int((debates_per_user > 1).sum()),
        "debates_per_opinion": _dist(debates_per_opinion),
        "successes_per_opinion": _dist(successes_per_opinion),
        "debates_per_challenger": _dist(debates_per_user),
        "successes_per_challenger": _dist(per_user["outcome"].sum()),
    }
    cols = [panel[c].astype(float).to_numpy() for c in DESCRIBE_VARIABLES]
    corr = [[_corr(a, b) for b in cols] for a in cols]
    return {
        "variables": stats,
        "counts": counts,
        "correlation": {"variables": list(DESCRIBE_VARIABLES), "matrix": corr},
        "fe_dropped": panel.attrs.get("fe_dropped"),
        "validation": panel.attrs.get("validation"),
    }


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

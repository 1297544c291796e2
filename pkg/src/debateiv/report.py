"""Plain-text result tables.

Tables are rendered from the JSON form of an :class:`~debateiv.estimators.Estimate`
(``Estimate.to_dict()``), never from live objects, so a table re-rendered from
a saved result file is identical to the one printed when it was produced.

Conventions: reputation coefficients are shown per 10 units of reputation,
skill per percentage point (its native unit) and position per standard
deviation. Stars mark two-sided p-values: ``***`` p<0.001, ``**`` p<0.01,
``*`` p<0.05. Standard errors are in parentheses.
"""

from __future__ import annotations

import json
import math
import re
from pathlib import Path

REPUTATION_SCALE = 10.0
_BIN = re.compile(r"^bin\d+$")
_LABELS = {
    "reputation": "Reputation (10 units)",
    "skill": "Skill (percentage)",
    "position_std": "Position (std. deviations)",
    "position": "Position (std. deviations)",
    "instrument": "Mean past position Z",
    "experience": "Opinions challenged previously",
}
_CHECK_ROWS = [("text", "Response text"), ("instrument", "Instrument Z"),
               ("opinion_fe", "Opinion fixed effects"), ("user_fe", "User fixed effects"),
               ("month_fe", "Month-year fixed effects")]


def stars(p: float | None) -> str:
    if p is None or not math.isfinite(p):
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def scale_for(name: str) -> float:
    return REPUTATION_SCALE if name.startswith("reputation") else 1.0


def label_for(name: str) -> str:
    m = re.match(r"^(.*)_x_bin(\d+)$", name)
    if m:
        return f"{label_for(m.group(1))} x bin {m.group(2)}"
    return _LABELS.get(name, name)


def _num(v: float | None) -> str:
    if v is None or not math.isfinite(v):
        return "---"
    if v == 0 or 1e-3 <= abs(v) < 1e4:
        return f"{v:.4f}"
    return f"{v:.3e}"


def _row_order(columns: list[dict]) -> list[str]:
    names: list[str] = []
    for col in columns:
        for n in col["fit"]["names"]:
            if n not in names and n != "const" and not _BIN.match(n):
                names.append(n)
    priority = {"reputation": 0, "skill": 1, "position_std": 2, "position": 2}

    def key(n):
        base = n.split("_x_bin")[0]
        return (priority.get(base, 3), names.index(n))
    return sorted(names, key=key)


def table_rows(result: dict) -> list[list[str]]:
    """Header plus body as a list of string rows (first cell = row label)."""
    cols = result["columns"]
    rows = [["", *[f"({i + 1})" for i in range(len(cols))]],
            ["", *[c["label"] for c in cols]]]
    for name in _row_order(cols):
        coef_row, se_row = [label_for(name)], [""]
        for c in cols:
            f = c["fit"]
            if name in f["names"]:
                i = f["names"].index(name)
                k = scale_for(name)
                b, se, p = f["coef"][i], f["se"][i], f["pvalue"][i]
                coef_row.append(_num(None if b is None else b * k) + stars(p))
                se_row.append(f"({_num(None if se is None else se * k)})")
            else:
                coef_row.append("")
                se_row.append("")
        rows += [coef_row, se_row]
    for key, label in _CHECK_ROWS:
        if any(key in c["checks"] for c in cols) and (
                key in ("text", "instrument", "opinion_fe") or any(c["checks"].get(key) for c in cols)):
            rows.append([label, *["yes" if c["checks"].get(key) else "no" for c in cols]])
    rows.append(["No. of debates", *[f"{c['fit']['n']:,}" for c in cols]])
    r2 = []
    for c in cols:
        f = c["fit"]
        iv_like = f.get("first_stage") is not None or f["method"].startswith("dml")
        r2.append("---" if iv_like or f.get("r2") is None else f"{f['r2']:.3f}")
    rows.append(["R2 (pseudo-R2 for logit)", *r2])
    if any(c["fit"].get("first_stage") for c in cols):
        fs = []
        for c in cols:
            first = c["fit"].get("first_stage") or {}
            vals = [v.get("f_robust") for v in first.values()]
            fs.append(", ".join(_num(v) for v in vals) if vals else "")
        rows.append(["First-stage F (robust)", *fs])
    return rows


def _align(rows: list[list[str]]) -> list[str]:
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    out = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(r[1:], widths[1:])]
        out.append("  ".join(cells).rstrip())
    return out


def render(result: dict) -> str:
    """Text table for an estimate dict (as produced by ``Estimate.to_dict``)."""
    lines = [f"Estimator: {result['estimator']}    Dependent variable: {result['outcome']}"]
    body = _align(table_rows(result))
    rule = "-" * max(len(line) for line in body)
    lines += [rule, *body[:2], rule, *body[2:], rule]
    clusters = sorted({c["fit"].get("cluster") or "none" for c in result["columns"]})
    lines.append(f"Standard errors clustered by: {', '.join(clusters)}.")
    lines.append("*** p<0.001; ** p<0.01; * p<0.05")
    extra = result.get("extra") or {}
    if "heterogeneity" in extra:
        h = extra["heterogeneity"]
        lines.append("")
        lines.append(f"Per-bin reputation LATE (10 units) by {h['moderator']} quantile:")
        for b, (late, se, share, n) in enumerate(zip(h["late"], h["late_se"], h["effect_share"],
                                                      h["bin_counts"]), start=1):
            lines.append(f"  bin {b}: {_num(late * REPUTATION_SCALE)} ({_num(se * REPUTATION_SCALE)})"
                         f"  reputation share {_num(share)}  n={n}")
    if "sweep" in extra:
        sw = extra["sweep"]
        lines.append("")
        lines.append("Plausibly-exogenous sweep (reputation, 10 units):")
        lines.append("  gamma           beta          se    ci_low   ci_high")
        for g, b, se, lo, hi in zip(sw["gamma"], sw["beta"], sw["se"], sw["ci_low"], sw["ci_high"]):
            k = REPUTATION_SCALE
            lines.append(f"  {g: .3e}  {_num(b * k):>9}  {_num(se * k):>9}  {_num(lo * k):>8}  {_num(hi * k):>8}")
        zc = extra.get("zero_crossing") or {}
        if "gamma_star" in zc:
            lines.append(f"  zero crossing gamma* = {zc['gamma_star']:.4e}; reduced-form coefficient of Z = "
                         f"{zc['reduced_form']:.4e} ({zc['reduced_form_se']:.4e})")
        elif "error" in zc:
            lines.append(f"  zero crossing unavailable: {zc['error']}")
    return "\n".join(lines) + "\n"


def render_file(path: str | Path) -> str:
    return render(json.loads(Path(path).read_text()))

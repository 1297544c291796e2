"""Structural simulator of the debate platform.

Opinions arrive one at a time. Each opinion ``p`` draws a latent ``U_p``
that shifts its threshold ``tau_p`` and (optionally) its number of
challengers. Challenger slots are filled in arrival order by sampling users
with weights

    lambda_u * (1 + r_u)^sel_rep * exp(k_u * U_p - k_u^2 / 2)
             * exp(-sel_queue * d_u * (j - 1) / mean_challengers),
    k_u = sel_sort * log1p(r_u),

so active and reputable users challenge more often, reputable users can sort
into easy opinions (``sel_sort``, the collider path) and queue-averse users
(large ``d_u``) avoid long queues. The sorting factor has mean one over
``U_p ~ N(0, 1)``: it moves a user's debates towards easy (or, for
``sel_sort < 0``, hard) opinions without changing how often they debate.
Queue aversion is the anticipated-position channel that makes mean past
position informative.

Each response is a bag of synthetic words. A block of "confounder" words has
log-odds shifted by the style ``v = a_u + sigma_v * noise``, where ``a_u`` is
the user's latent ability; ``f`` is the realized share of confounder tokens
and enters the outcome with loading ``w``. Because reputation accumulates
past successes, it inherits the ability signal and is confounded unless the
text is controlled for.

Outcome modes
-------------
``linear``  ``P(Y=1) = clip(tau_p + b1*r + b2*s + b3*t + w*f)``; the success
            probability is exactly linear, so linear estimators target the
            structural coefficients (noise ``eps = Y - p``).
``binary``  ``Y = 1[tau_p + b1*r + b2*s + b3*t + w*f + eps > 0]`` with
            standard-logistic ``eps``; used for sign and ordering checks.

Skill is computed mechanically from realized history with the same smoothing
as the panel module, so simulated panels re-derive to the generating values.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigurationError, SimulationError
from .panel import DEFAULT_S_MU, RECORD_COLUMNS, SMOOTHING
from .stemmer import stem_fixed
from .textfeat import PRONOUNS

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aio"


def betas_from_quality(alpha_r: float, alpha_q: float, gamma_s: float, gamma_t: float,
                       scale: float = 1.0) -> dict[str, float]:
    """Map the perceived-quality weights to outcome coefficients.

    Perceived quality ``alpha_r * r + alpha_q * (gamma_s * s + gamma_t * t)``
    gives ``beta_r = scale*alpha_r``, ``beta_s = scale*alpha_q*gamma_s``,
    ``beta_t = scale*alpha_q*gamma_t``.
    """
    if not math.isclose(alpha_r + alpha_q, 1.0, abs_tol=1e-12):
        raise ConfigurationError("alpha_r + alpha_q must equal 1")
    if alpha_r < 0 or alpha_q < 0:
        raise ConfigurationError("quality weights must be nonnegative")
    return {"beta_r": scale * alpha_r, "beta_s": scale * alpha_q * gamma_s,
            "beta_t": scale * alpha_q * gamma_t}


@dataclass
class SimConfig:
    # sizes
    n_users: int = 2000
    n_opinions: int = 2000
    mean_challengers: float = 10.0
    opinions_per_month: int = 100
    # outcome
    outcome_mode: str = "linear"
    beta_r: float = 0.01
    beta_s: float = 0.002
    beta_t: float = -0.004
    interaction_reputation_length: float = 0.0  # beta_r shifts by this * log(len / median len)
    tau_mean: float = 0.12
    tau_sd: float = 0.03
    tau_load: float = 0.0  # tau_p = tau_mean + tau_sd*N + tau_load*U_p
    # users
    ability_sd: float = 1.0        # sigma_a
    style_sd: float = 0.5          # sigma_v
    earliness_sd: float = 0.5      # log queue aversion
    ability_earliness_corr: float = 0.0
    ability_activity_corr: float = 0.0
    activity_sd: float = 0.5
    deleted_fraction: float = 0.0
    # selection
    sel_rep: float = 0.0
    sel_opinion: float = 0.0
    sel_sort: float = 0.0
    sel_queue: float = 0.0
    # text
    vocab_size: int = 50
    confounder_block: int = 10
    text_loading: float = 0.0       # w
    mean_tokens: float = 30.0
    token_length_sd: float = 0.4
    # side outcomes
    nonposter_rate: float = 0.05
    nonposter_position_decay: float = 0.2
    tree_base: float = 2.0
    tree_reputation: float = 0.05
    multi_party_logit: float = -1.5
    multi_party_reputation: float = 0.0
    s_mu: float = DEFAULT_S_MU
    seed: int = 0

    def __post_init__(self):
        if self.outcome_mode not in ("linear", "binary"):
            raise ConfigurationError("outcome_mode must be 'linear' or 'binary'")
        if self.n_users < 1 or self.n_opinions < 1:
            raise ConfigurationError("need at least one user and one opinion")
        if self.mean_challengers < 1:
            raise ConfigurationError("mean_challengers must be >= 1")
        for name in ("ability_sd", "style_sd", "earliness_sd", "activity_sd", "tau_sd",
                     "nonposter_rate", "tree_base", "mean_tokens", "token_length_sd"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if not 0 <= self.confounder_block <= self.vocab_size:
            raise ConfigurationError("confounder block must fit in the vocabulary")
        if self.vocab_size < 1:
            raise ConfigurationError("vocab_size must be >= 1")
        for name in ("ability_earliness_corr", "ability_activity_corr"):
            if not -1 < getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must lie in (-1, 1)")
        if not 0 <= self.deleted_fraction < 1:
            raise ConfigurationError("deleted_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown simulation settings: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "SimConfig":
        d = self.to_dict()
        d.update(changes)
        return SimConfig.from_dict(d)


@dataclass
class SimTruth:
    config: SimConfig
    vocabulary: list[str]
    confounder_terms: list[str]
    ability: np.ndarray            # per user
    opinion_latent: np.ndarray     # per opinion
    threshold: np.ndarray          # per opinion (tau_p)
    debates: pd.DataFrame          # per debate latent quantities, aligned with records
    n_clipped: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def coefficients(self) -> dict[str, float]:
        c = self.config
        return {"reputation": c.beta_r, "skill": c.beta_s, "position": c.beta_t,
                "text_loading": c.text_loading,
                "interaction_reputation_length": c.interaction_reputation_length}

    def to_dict(self) -> dict:
        return {
            "coefficients": self.coefficients,
            "config": self.config.to_dict(),
            "vocabulary": self.vocabulary,
            "confounder_terms": self.confounder_terms,
            "n_clipped": self.n_clipped,
            "n_debates": int(len(self.debates)),
            "extra": self.extra,
        }

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        (out_dir / "truth.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        self.debates.to_csv(out_dir / "truth_debates.csv", index=False)


def synthetic_vocabulary(size: int, rng: np.random.Generator) -> list[str]:
    """Distinct pronounceable words that survive preprocessing unchanged."""
    words: list[str] = []
    seen: set[str] = set()
    attempts = 0
    while len(words) < size:
        attempts += 1
        if attempts > 1000 * size + 10_000:
            raise SimulationError("could not generate enough stem-stable words")
        n_syll = int(rng.integers(2, 4))
        word = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(n_syll))
        if word in seen or word in PRONOUNS or stem_fixed(word) != word:
            continue
        seen.add(word)
        words.append(word)
    return words


def _rows_to_text(counts: np.ndarray, words: list[str], rng: np.random.Generator) -> list[str]:
    texts = []
    word_arr = np.array(words, dtype=object)
    for row in counts:
        tokens = np.repeat(word_arr, row)
        rng.shuffle(tokens)
        texts.append(" ".join(tokens))
    return texts


def _correlated(z: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Standard normal draws with correlation ``rho`` to the standardized ``z``."""
    return rho * z + math.sqrt(1.0 - rho ** 2) * rng.normal(size=z.size)


def _month_label(opinion_index: int, per_month: int) -> str:
    m = opinion_index // per_month
    return f"{2013 + m // 12:04d}-{1 + m % 12:02d}"


def simulate(config: SimConfig) -> tuple[pd.DataFrame, SimTruth]:
    """Generate debate records (panel schema) and the ground truth."""
    c = config
    rng = np.random.default_rng(c.seed)
    U = c.n_users
    words = synthetic_vocabulary(c.vocab_size, rng)
    block = np.zeros(c.vocab_size, dtype=bool)
    block[rng.choice(c.vocab_size, size=c.confounder_block, replace=False)] = True
    base_logits = rng.normal(0.0, 1.0, size=c.vocab_size)

    ability = rng.normal(0.0, c.ability_sd, size=U)
    z_a = ability / c.ability_sd if c.ability_sd > 0 else np.zeros(U)
    z_e = _correlated(z_a, c.ability_earliness_corr, rng)
    aversion = np.exp(c.earliness_sd * z_e)
    activity = np.exp(c.activity_sd * _correlated(z_a, c.ability_activity_corr, rng))
    length_pref = c.token_length_sd * rng.normal(size=U)
    deleted = rng.random(U) < c.deleted_fraction

    P = c.n_opinions
    latent = rng.normal(size=P)
    tau = c.tau_mean + c.tau_sd * rng.normal(size=P) + c.tau_load * latent
    mu_extra = (c.mean_challengers - 1.0) * np.exp(c.sel_opinion * latent - 0.5 * c.sel_opinion ** 2)
    n_chal = 1 + rng.poisson(mu_extra)
    n_chal = np.minimum(n_chal, U)

    rep = np.zeros(U)
    succ = np.zeros(U)
    debates_so_far = np.zeros(U)
    pos_sum = np.zeros(U)

    rows = {k: [] for k in ("opinion", "user", "position", "reputation", "skill", "instrument")}
    for p in range(P):
        sort = c.sel_sort * np.log1p(rep)
        base_w = activity * (1.0 + rep) ** c.sel_rep * np.exp(sort * latent[p] - 0.5 * sort ** 2)
        chosen = np.zeros(U, dtype=bool)
        for j in range(n_chal[p]):
            w = base_w * np.exp(-c.sel_queue * aversion * j / c.mean_challengers)
            w[chosen] = 0.0
            cdf = np.cumsum(w)
            if cdf[-1] <= 0 or not np.isfinite(cdf[-1]):
                raise SimulationError("selection weights degenerate")
            u = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            u = min(u, U - 1)
            while chosen[u] or w[u] == 0:  # guard against floating edge cases
                u = (u + 1) % U
            chosen[u] = True
            rows["opinion"].append(p)
            rows["user"].append(u)
            rows["position"].append(j + 1)
            rows["reputation"].append(rep[u])
            rows["skill"].append(100.0 * (succ[u] + SMOOTHING * c.s_mu) / (debates_so_far[u] + SMOOTHING))
            rows["instrument"].append(pos_sum[u] / debates_so_far[u] if debates_so_far[u] > 0 else np.nan)
        # outcomes of this opinion's debates (need texts first)
        start = len(rows["opinion"]) - n_chal[p]
        idx = slice(start, None)
        users_p = np.array(rows["user"][idx])
        _fill_opinion(c, rng, p, users_p, np.array(rows["position"][idx]), tau[p], rows,
                      ability, length_pref, base_logits, block)
        ys = np.array(rows.setdefault("y", [])[idx])
        npd = np.array(rows["nonposter"][idx])
        rep[users_p] += ys + npd
        succ[users_p] += ys
        debates_so_far[users_p] += 1
        pos_sum[users_p] += np.array(rows["position"][idx])

    n = len(rows["opinion"])
    if n == 0:
        raise SimulationError("configuration produced no debates")
    counts = np.array(rows["counts"])
    texts = _rows_to_text(counts, words, rng)
    word_len = np.array([len(wd) for wd in words])
    resp_len = (counts * (word_len + 1)).sum(axis=1) - 1
    resp_len = np.maximum(resp_len, 0)
    opinion = np.array(rows["opinion"])
    user = np.array(rows["user"])
    position = np.array(rows["position"])
    reputation = np.array(rows["reputation"])
    y = np.array(rows["y"], dtype=np.int64)
    op_len = (200 + rng.poisson(800, size=P))[opinion]
    tree_len = 1 + y + rng.poisson(np.maximum(c.tree_base + c.tree_reputation * reputation, 0.0))
    mp_index = c.multi_party_logit + c.multi_party_reputation * reputation
    multi_party = (rng.random(n) < 1.0 / (1.0 + np.exp(-mp_index))).astype(np.int64)
    arrival = position - 1

    records = pd.DataFrame({
        "opinion_id": [f"p{o:05d}" for o in opinion],
        "user_id": [f"u{u:05d}" for u in user],
        "arrival_index": arrival.astype(np.int64),
        "month": [_month_label(o, c.opinions_per_month) for o in opinion],
        "outcome": y,
        "nonposter_deltas": np.array(rows["nonposter"], dtype=np.int64),
        "response_text": texts,
        "opinion_text_len": op_len.astype(np.int64),
        "response_text_len": resp_len.astype(np.int64),
        "multi_party": multi_party,
        "tree_len": tree_len.astype(np.int64),
        "deleted_user": deleted[user].astype(np.int64),
    })
    assert tuple(records.columns) == RECORD_COLUMNS
    debates = pd.DataFrame({
        "opinion_id": records["opinion_id"],
        "user_id": records["user_id"],
        "opinion_index": opinion,
        "user_index": user,
        "position": position,
        "reputation": reputation,
        "skill": np.array(rows["skill"]),
        "instrument": np.array(rows["instrument"]),
        "confounder_share": np.array(rows["f"]),
        "n_tokens": counts.sum(axis=1),
        "style": np.array(rows["v"]),
        "ability": ability[user],
        "aversion": aversion[user],
        "opinion_latent": latent[opinion],
        "threshold": tau[opinion],
        "beta_r_effective": np.array(rows["beta_r_eff"]),
        "index": np.array(rows["index"]),
        "noise": np.array(rows["noise"]),
        "quality": np.array(rows["quality"]),
        "deleted_user": deleted[user].astype(np.int64),
    })
    truth = SimTruth(config=c, vocabulary=list(words),
                     confounder_terms=[w for w, b in zip(words, block) if b],
                     ability=ability, opinion_latent=latent, threshold=tau, debates=debates,
                     n_clipped=int(sum(rows["clipped"])))
    return records, truth


def _fill_opinion(c: SimConfig, rng, p, users, positions, tau_p, rows, ability, length_pref,
                  base_logits, block):
    """Draw text and outcomes for one opinion's challengers."""
    k = users.size
    v = ability[users] + c.style_sd * rng.normal(size=k)
    logits = base_logits[None, :] + v[:, None] * block[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    n_tok = 1 + rng.poisson(c.mean_tokens * np.exp(length_pref[users]))
    counts = rng.multinomial(n_tok, probs)
    f = counts[:, block].sum(axis=1) / n_tok if block.any() else np.zeros(k)
    r = np.array(rows["reputation"][-k:])
    s = np.array(rows["skill"][-k:])
    beta_eff = c.beta_r + c.interaction_reputation_length * np.log(n_tok / c.mean_tokens)
    quality = c.beta_s * s + c.beta_t * positions + c.text_loading * f
    index = tau_p + beta_eff * r + quality
    if c.outcome_mode == "linear":
        prob = np.clip(index, 0.0, 1.0)
        clipped = (index < 0) | (index > 1)
        y = (rng.random(k) < prob).astype(np.int64)
        noise = y - index
    else:
        eps = rng.logistic(size=k)
        y = (index + eps > 0).astype(np.int64)
        clipped = np.zeros(k, dtype=bool)
        noise = eps
    npd = rng.poisson(c.nonposter_rate * np.exp(-c.nonposter_position_decay * (positions - 1)))
    for key, vals in (("y", y), ("nonposter", npd), ("f", f), ("v", v), ("beta_r_eff", beta_eff),
                      ("index", index), ("noise", noise), ("quality", quality), ("clipped", clipped)):
        rows.setdefault(key, []).extend(vals.tolist())
    rows.setdefault("counts", []).extend(list(counts))


# ---------------------------------------------------------------------------
# oracle nuisances

ORACLE_TARGETS = ("outcome", "instrument", "reputation", "skill", "position")


def _projection_basis(debates: pd.DataFrame) -> np.ndarray:
    f = debates["confounder_share"].to_numpy(dtype=float)
    f = (f - f.mean()) / (f.std() if f.std() > 0 else 1.0)
    logn = np.log(debates["n_tokens"].to_numpy(dtype=float))
    logn = logn - logn.mean()
    return np.column_stack([f, f ** 2, f ** 3, logn, logn * f])


def oracle_nuisances(truth: SimTruth, panel: pd.DataFrame) -> pd.DataFrame:
    """Conditional expectations of the DML targets given text and opinion.

    The structural outcome part ``g = tau_p + w*f`` is exact. The treatment
    and instrument means have no closed form (they integrate over each
    user's history), so they are approximated by the full-panel least-squares
    projection on opinion indicators plus a cubic in the confounder share
    and log token count, the statistics of the text that carry information
    about the latent ability. The outcome nuisance is ``l = g + b'm`` with
    ``m`` the treatment means (``b`` the true coefficients), which is the
    conditional mean implied by the partially linear model.

    ``panel`` must be a derived panel of the simulated records (rows matched
    on ``opinion_id``/``user_id``). Returns one column per target plus ``g``.
    """
    key = ["opinion_id", "user_id"]
    deb = truth.debates.drop_duplicates(key)
    merged = panel[key].merge(deb, on=key, how="left", validate="one_to_one")
    if merged["threshold"].isna().any():
        raise ConfigurationError("panel rows do not match the simulation truth")
    c = truth.config
    g = merged["threshold"].to_numpy() + c.text_loading * merged["confounder_share"].to_numpy()
    out = pd.DataFrame(index=panel.index)
    out["g"] = g
    basis = _projection_basis(merged)
    from .linreg import within_transform  # local import keeps simgen light

    for target, col in (("reputation", "reputation"), ("skill", "skill"), ("position", "position"),
                        ("instrument", "instrument")):
        yv = panel[col].to_numpy(dtype=float)
        ok = np.isfinite(yv)
        pred = np.full(yv.size, np.nan)
        if ok.any():
            cd = pd.factorize(panel["opinion_id"][ok])[0]
            dmb = within_transform(basis[ok], [cd])
            dmy = within_transform(yv[ok], [cd])
            coef, *_ = np.linalg.lstsq(dmb.values, dmy.values, rcond=None)
            # fitted = opinion mean of (y - basis coef) + basis coef
            resid_fe = dmy.fe_component - dmb.fe_component @ coef
            pred[ok] = resid_fe + basis[ok] @ coef
        out[target] = pred
    beta_r = merged["beta_r_effective"].to_numpy()
    out["outcome"] = g + beta_r * out["reputation"] + c.beta_s * out["skill"] + c.beta_t * out["position"]
    return out

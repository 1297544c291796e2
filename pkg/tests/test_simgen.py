from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from debateiv import linreg, panel, simgen
from debateiv.errors import ConfigurationError

SMALL = dict(n_users=500, n_opinions=500)


def sim(**kw):
    return simgen.simulate(simgen.SimConfig(**{**SMALL, **kw}))


def within_ols(records):
    d = panel.derive(records)
    d["position_std"] = panel.standardize(d["position"])[0]
    spec = linreg.DesignSpec("outcome", ["reputation", "skill", "position_std"], fixed_effects=["opinion_id"])
    return linreg.ols(spec, d), d


def test_deterministic_under_seed():
    a, ta = sim(seed=4, text_loading=0.3, sel_rep=0.5)
    b, tb = sim(seed=4, text_loading=0.3, sel_rep=0.5)
    pd.testing.assert_frame_equal(a, b)
    pd.testing.assert_frame_equal(ta.debates, tb.debates)
    c, _ = sim(seed=5, text_loading=0.3, sel_rep=0.5)
    assert not a["response_text"].equals(c["response_text"])


def test_records_pass_panel_validators():
    rec, truth = sim(seed=1, deleted_fraction=0.05, sel_rep=0.3, sel_queue=1.0)
    panel.validate_records(rec)
    assert tuple(rec.columns) == panel.RECORD_COLUMNS
    assert (rec.loc[rec["outcome"] == 1, "tree_len"] >= 2).all()
    assert set(truth.confounder_terms) <= set(truth.vocabulary)


def test_simulated_history_agrees_with_panel_derivation():
    rec, truth = sim(seed=2, nonposter_rate=0.5)
    d = panel.derive(rec, keep_deleted=True)
    np.testing.assert_array_equal(d["reputation"], truth.debates["reputation"])
    np.testing.assert_array_equal(d["position"], truth.debates["position"])
    np.testing.assert_allclose(d["skill"], truth.debates["skill"], rtol=0, atol=1e-12)
    np.testing.assert_allclose(d["instrument"], truth.debates["instrument"], rtol=0, atol=1e-12,
                               equal_nan=True)


def test_linear_mode_outcome_noise_is_the_residual_of_the_index():
    rec, truth = sim(seed=3, text_loading=0.2, tau_mean=0.3)
    t = truth.debates
    c = truth.config
    index = (t["threshold"] + t["beta_r_effective"] * t["reputation"] + c.beta_s * t["skill"]
             + c.beta_t * t["position"] + c.text_loading * t["confounder_share"])
    np.testing.assert_allclose(index, t["index"], rtol=0, atol=1e-12)
    np.testing.assert_allclose(rec["outcome"] - index, t["noise"], rtol=0, atol=1e-12)


def test_negative_position_effect_lowers_success_across_quartiles():
    rec, _ = simgen.simulate(simgen.SimConfig(seed=0, beta_t=-0.02, tau_mean=0.5, mean_challengers=12))
    d = panel.derive(rec)
    rank = d["position"].rank(method="first").to_numpy()
    bins = panel.bin_quantiles(rank, 4)
    rates = d.groupby(bins.labels)["outcome"].mean().to_numpy()
    assert np.all(np.diff(rates) < 0)


def test_selection_links_reputation_to_future_participation():
    rec, _ = simgen.simulate(simgen.SimConfig(seed=0, sel_rep=0.5, activity_sd=0.5))
    d = panel.derive(rec)
    assert np.corrcoef(d["reputation"], d["future_participation"])[0, 1] > 0


def test_null_reputation_dgp():
    hits = 0
    for seed in range(20):
        rec, _ = sim(seed=seed, beta_r=0.0, style_sd=0.0, tau_mean=0.3)
        fit, _ = within_ols(rec)
        hits += abs(fit["reputation"]) < 2 * fit.se_of("reputation")
    assert hits >= 18


@pytest.mark.slow
def test_within_ols_recovers_each_coefficient():
    hits = {"reputation": 0, "skill": 0, "position_std": 0}
    for seed in range(50):
        rec, truth = sim(seed=seed, tau_mean=0.3)
        fit, d = within_ols(rec)
        sd_t = d["position"].std(ddof=1)
        want = {"reputation": truth.config.beta_r, "skill": truth.config.beta_s,
                "position_std": truth.config.beta_t * sd_t}
        for k, v in want.items():
            hits[k] += abs(fit[k] - v) < 2 * fit.se_of(k)
    assert all(h >= 45 for h in hits.values()), hits


def test_zero_loading_oracle_structural_part_ignores_text():
    rec, truth = sim(seed=6, text_loading=0.0)
    d = panel.derive(rec)
    o = simgen.oracle_nuisances(truth, d)
    assert (o.groupby(d["opinion_id"])["g"].nunique() == 1).all()
    rec, truth = sim(seed=6, text_loading=0.0, beta_r=0.0, beta_s=0.0, beta_t=0.0)
    d = panel.derive(rec)
    o = simgen.oracle_nuisances(truth, d)
    assert (o.groupby(d["opinion_id"])["outcome"].nunique() == 1).all()


def test_oracle_rejects_foreign_panel():
    rec, truth = sim(seed=7)
    other, _ = sim(seed=8, n_users=30)
    with pytest.raises(ConfigurationError):
        simgen.oracle_nuisances(truth, panel.derive(other))


def test_config_validation_and_quality_weights():
    with pytest.raises(ConfigurationError):
        simgen.SimConfig(outcome_mode="probit")
    with pytest.raises(ConfigurationError):
        simgen.SimConfig(vocab_size=5, confounder_block=6)
    with pytest.raises(ConfigurationError):
        simgen.SimConfig(ability_sd=-1.0)
    b = simgen.betas_from_quality(0.8, 0.2, 0.01, -0.02)
    assert b == pytest.approx({"beta_r": 0.8, "beta_s": 0.002, "beta_t": -0.004})
    with pytest.raises(ConfigurationError):
        simgen.betas_from_quality(0.5, 0.6, 0.0, 0.0)


def test_config_dict_round_trip(tmp_path):
    c = simgen.SimConfig(seed=3, beta_r=0.02, outcome_mode="binary")
    assert simgen.SimConfig.from_dict(c.to_dict()) == c
    rec, truth = simgen.simulate(c.replace(n_users=50, n_opinions=40))
    truth.write(tmp_path)
    assert (tmp_path / "truth.json").exists() and (tmp_path / "truth_debates.csv").exists()
    assert set(rec["outcome"].unique()) <= {0, 1}

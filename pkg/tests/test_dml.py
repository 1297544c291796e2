from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from debateiv import dml, neural, panel, simgen, textfeat
from debateiv.errors import PreconditionError, RankDeficiencyError, WeakInstrumentError
from debateiv.linreg import ols_fit, tsls_fit


def grouped_frame(n_opinions=10, per=10, seed=0):
    rng = np.random.default_rng(seed)
    op = np.repeat([f"o{i}" for i in range(n_opinions)], per)
    return pd.DataFrame({"opinion_id": rng.permutation(op)})


def synthetic_residuals(n=500, seed=0, theta=(0.3, -0.2, 0.1), noise=1.0):
    """Residual panel with a known linear relation and an informative instrument."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=n)
    u = rng.normal(size=n)
    r = 0.7 * z + 0.5 * u + rng.normal(size=n)
    s, t = rng.normal(size=n), rng.normal(size=n)
    y = theta[0] * r + theta[1] * s + theta[2] * t + noise * u
    return pd.DataFrame({"opinion_id": np.arange(n) % 25, "y_res": y, "r_res": r, "s_res": s,
                         "t_res": t, "z_res": z})


# ---------------------------------------------------------------------------
# splits

def test_split_every_opinion_in_both_samples():
    f = grouped_frame()
    plan = dml.make_split(f, seed=3, estimation_share=0.1)
    for _, rows in f.groupby("opinion_id").groups.items():
        roles = plan.role[np.asarray(rows)]
        assert (roles == dml.INFERENCE).any() and (roles != dml.INFERENCE).any()
    est = plan.estimation.size
    assert 10 <= est <= 10 + 2 * np.sqrt(100 * 0.1 * 0.9)
    assert set(plan.train) | set(plan.validation) == set(plan.estimation)
    assert not set(plan.estimation) & set(plan.inference)


def test_half_split_of_two_debate_opinions():
    f = grouped_frame(n_opinions=30, per=2)
    plan = dml.make_split(f, seed=1, estimation_share=0.5)
    for _, rows in f.groupby("opinion_id").groups.items():
        roles = plan.role[np.asarray(rows)]
        assert (roles == dml.INFERENCE).sum() == 1


def test_split_deterministic_and_rejects_singletons():
    f = grouped_frame()
    np.testing.assert_array_equal(dml.make_split(f, 5).role, dml.make_split(f, 5).role)
    assert not np.array_equal(dml.make_split(f, 5).role, dml.make_split(f, 6).role)
    bad = pd.concat([f, pd.DataFrame({"opinion_id": ["lonely"]})], ignore_index=True)
    with pytest.raises(PreconditionError):
        dml.make_split(bad, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=15), st.integers(min_value=2, max_value=12),
       st.floats(min_value=0.05, max_value=0.6), st.integers(min_value=0, max_value=999))
def test_split_constraint_property(n_opinions, per, share, seed):
    f = grouped_frame(n_opinions, per, seed)
    plan = dml.make_split(f, seed, estimation_share=share)
    codes = pd.factorize(f["opinion_id"])[0]
    inf = np.bincount(codes[plan.inference], minlength=n_opinions)
    est = np.bincount(codes[plan.estimation], minlength=n_opinions)
    assert (inf >= 1).all() and (est >= 1).all()
    assert plan.train.size >= 1 and plan.validation.size >= 1


# ---------------------------------------------------------------------------
# final stage identities

def test_orthogonal_moment_is_zero():
    res = dml.pliv_estimate(synthetic_residuals())
    df = synthetic_residuals()
    W = df[["r_res", "s_res", "t_res"]].to_numpy()
    e = df["y_res"].to_numpy() - W @ res.fit.coef
    assert abs(np.sum(e * df["z_res"].to_numpy())) < 1e-8
    assert res.moment_norm < 1e-12


def test_pliv_is_wald_ratio_of_residual_regressions():
    df = synthetic_residuals(seed=2)
    res = dml.pliv_estimate(df)
    st_ = df[["s_res", "t_res"]].to_numpy()
    rf = ols_fit(df["y_res"], np.column_stack([df["z_res"], st_]), ["z", "s", "t"])
    fs = ols_fit(df["r_res"], np.column_stack([df["z_res"], st_]), ["z", "s", "t"])
    assert res.theta["reputation"] == pytest.approx(rf["z"] / fs["z"], abs=1e-10)


def test_instrument_equal_to_treatment_gives_plr():
    df = synthetic_residuals(seed=4)
    df["z_res"] = df["r_res"]
    a, b = dml.pliv_estimate(df), dml.plr_estimate(df)
    np.testing.assert_allclose(a.fit.coef, b.fit.coef, rtol=0, atol=1e-10)


def test_noiseless_residuals_recover_coefficients():
    df = synthetic_residuals(seed=5, noise=0.0)
    np.testing.assert_allclose(dml.plr_estimate(df).fit.coef, [0.3, -0.2, 0.1], atol=1e-6)
    np.testing.assert_allclose(dml.pliv_estimate(df).fit.coef, [0.3, -0.2, 0.1], atol=1e-6)


def test_weak_residual_instrument_and_rank_errors():
    df = synthetic_residuals(seed=6)
    df["z_res"] = np.random.default_rng(0).normal(size=len(df))
    with pytest.raises(WeakInstrumentError):
        dml.pliv_estimate(df, weak_floor=10.0)
    df = synthetic_residuals(seed=6)
    df["s_res"] = 0.0
    with pytest.raises(RankDeficiencyError):
        dml.plr_estimate(df)
    with pytest.raises(PreconditionError):
        dml.pliv_estimate(df.iloc[:0])


def test_absorbing_opinion_means_matches_demeaned_2sls():
    df = synthetic_residuals(seed=7)
    res = dml.pliv_estimate(df, absorb_opinion_fe=True)
    dm = df.groupby("opinion_id").transform(lambda c: c - c.mean())
    fit = tsls_fit(dm["y_res"], dm[["s_res", "t_res"]], dm["r_res"], dm["z_res"], ["s", "t"], ["r"], ["z"])
    np.testing.assert_allclose(res.fit.coef, fit.coef, atol=1e-12)


# ---------------------------------------------------------------------------
# residuals and the bias diagnostic

def _panel_with_predictions(n=60, seed=0):
    rng = np.random.default_rng(seed)
    p = pd.DataFrame({"opinion_id": np.arange(n) % 6, "outcome": rng.integers(0, 2, n),
                      "instrument": rng.uniform(1, 5, n), "reputation": rng.poisson(3, n),
                      "skill": rng.uniform(1, 30, n), "position_std": rng.normal(size=n)})
    truth = pd.DataFrame({"outcome": rng.uniform(0.2, 0.8, n), "instrument": rng.uniform(1, 5, n),
                          "reputation": rng.uniform(1, 5, n), "skill": rng.uniform(1, 30, n),
                          "position": rng.normal(size=n)})
    return p, truth


def test_oracle_injection_gives_noise_residuals():
    p, truth = _panel_with_predictions()
    rows = np.arange(0, 60, 2)
    res = dml.residualize_predictions(p, truth, rows)
    np.testing.assert_array_equal(res["y_res"], p["outcome"].to_numpy()[rows] - truth["outcome"].to_numpy()[rows])
    np.testing.assert_array_equal(res["t_res"], p["position_std"].to_numpy()[rows] - truth["position"].to_numpy()[rows])


def test_zero_network_residual_is_observed_value():
    p, _ = _panel_with_predictions()
    X = np.ones((len(p), 3))
    targets = {k: dml.Target(t.column, "identity", "mean_squared_error", 1)
               for k, t in dml.default_targets().items()}
    nets = {}
    for k, t in targets.items():
        spec = neural.MlpSpec(input_dim=3, hidden_layers=1, hidden_width=2, batch_norm=False)
        params = neural.init(spec, 0)
        for W in params.weights:
            W[:] = 0.0
        nets[k] = dml.Nuisance(t, spec, params, neural.TrainReport(), neural.TrainConfig())
    plan = dml.make_split(p, 0, estimation_share=0.3)
    res = dml.residualize(p, X, plan, dml.NuisanceSet(nets))
    np.testing.assert_array_equal(res["r_res"], p["reputation"].to_numpy()[plan.inference].astype(float))
    np.testing.assert_array_equal(res["y_res"], p["outcome"].to_numpy()[plan.inference].astype(float))


def test_nonfinite_prediction_names_row():
    p, truth = _panel_with_predictions()
    truth.loc[4, "skill"] = np.nan
    with pytest.raises(Exception, match="row 4"):
        dml.residualize_predictions(p, truth, np.arange(10))


def _diag_inputs(eps, seed=0, n=400):
    """Residual panel whose predictions miss the truth by eps * a fixed direction."""
    rng = np.random.default_rng(seed)
    truth = pd.DataFrame({k: rng.normal(size=n) for k in dml.default_targets()})
    direction = {k: rng.normal(size=n) for k in truth}
    res = pd.DataFrame({"opinion_id": np.arange(n) % 20})
    for k in truth:
        res[k] = truth[k] + rng.normal(size=n)
        res[f"{k}_hat"] = truth[k] - eps * direction[k]
        res[dml.RESIDUAL_COLUMNS[k]] = res[k] - res[f"{k}_hat"]
    return res, truth


def test_bias_diagnostic_product_term_scales_quadratically():
    res0, truth0 = _diag_inputs(0.0)
    result = dml.pliv_estimate(res0, weak_floor=0)
    d0 = dml.bias_diagnostic(res0, truth0, result)
    assert all(v == 0.0 for v in d0["product_terms"].values())
    terms = []
    for eps in (0.01, 0.02, 0.04):
        res, truth = _diag_inputs(eps)
        terms.append(dml.bias_diagnostic(res, truth, result)["product_terms"]["reputation"])
    assert terms[1] / terms[0] == pytest.approx(4.0, rel=1e-9)
    assert terms[2] / terms[0] == pytest.approx(16.0, rel=1e-9)
    with pytest.raises(PreconditionError):
        dml.bias_diagnostic(res0, None, result)


# ---------------------------------------------------------------------------
# small end-to-end run on simulated data

SMALL = dict(n_users=400, n_opinions=300, beta_r=0.003, beta_s=0.001, beta_t=-0.003,
             text_loading=0.5, ability_sd=1.5, tau_mean=0.08, tau_sd=0.02, sel_rep=0.2,
             sel_queue=2.0, earliness_sd=1.0, nonposter_rate=0.3, nonposter_position_decay=0.3,
             ability_activity_corr=0.6, activity_sd=0.5)
FAST = neural.TrainConfig(learning_rate=1e-3, max_iterations=300, eval_every=10)


@pytest.fixture(scope="module")
def small_run():
    rec, truth = simgen.simulate(simgen.SimConfig(seed=11, **SMALL))
    s = dml.dml_sample(panel.derive(rec))
    feats = textfeat.featurize(s["response_text"].tolist())
    result, residuals = dml.run(s, feats.matrix, seed=11, config=FAST, batch_norm=False,
                                weak_floor=0.0, estimation_share=0.3)
    return s, feats, truth, result, residuals


def test_inference_rows_never_used_for_training(small_run):
    s, feats, _, result, residuals = small_run
    plan = dml.make_split(s, 11, estimation_share=0.3)
    assert set(residuals["row"]) == set(plan.inference)
    assert not set(residuals["row"]) & set(plan.estimation)
    assert result.split["n_inference"] == len(residuals)


def test_mean_outcome_residual_near_zero(small_run):
    # the residual mean compares an inference-sample mean with a prediction
    # whose level is fixed on the estimation sample, so both samples add noise
    s, _, _, _, residuals = small_run
    plan = dml.make_split(s, 11, estimation_share=0.3)
    y = residuals["y_res"].to_numpy()
    y_est = s["outcome"].to_numpy()[plan.estimation]
    se = np.sqrt(y.var(ddof=1) / y.size + y_est.var(ddof=1) / y_est.size)
    assert abs(y.mean()) < 3 * se


def test_recalibration_matches_estimation_mean(small_run):
    s, feats, _, _, _ = small_run
    X = dml.build_inputs(s, feats.matrix)
    plan = dml.make_split(s, 11, estimation_share=0.3)
    ns = dml.fit_nuisances(s, X, plan, config=FAST.replace(max_iterations=40), batch_norm=False)
    est = plan.estimation
    for net in ns.networks.values():
        y = s[net.target.column].to_numpy(float)[est]
        pred = net.predict(sp_rows(X, est))
        assert pred.mean() == pytest.approx(y.mean(), rel=1e-8, abs=1e-10)


def test_reputation_network_beats_variance(small_run):
    result = small_run[3]
    rep = next(r for r in result.networks if r["target"] == "reputation")
    assert rep["validation"] ** 2 < rep["variance_train"]
    assert {r["target"] for r in result.networks} == set(dml.default_targets())


def test_pipeline_is_deterministic(small_run):
    s, feats, _, result, _ = small_run
    again, _ = dml.run(s, feats.matrix, seed=11, config=FAST, batch_norm=False, weak_floor=0.0,
                       estimation_share=0.3)
    assert again.to_json() == result.to_json()


ORACLE_COLUMNS = {"outcome": "outcome", "instrument": "instrument", "reputation": "reputation",
                  "skill": "skill", "position": "position_std"}


def _oracle_vs_network(s, truth, residuals):
    oracle = simgen.oracle_nuisances(truth, s).iloc[residuals["row"].to_numpy()].reset_index(drop=True)
    sd = s.attrs["position_standardization"]
    oracle["position"] = (oracle["position"] - sd["mean"]) / sd["sd"]
    out = {}
    for name in ORACLE_COLUMNS:
        mse_net = np.mean((residuals[name] - residuals[f"{name}_hat"]) ** 2)
        mse_oracle = np.mean((residuals[name] - oracle[name]) ** 2)
        out[name] = (mse_oracle, mse_net)
    return out


def test_oracle_mse_not_worse_than_networks(small_run):
    s, _, truth, _, residuals = small_run
    for name, (mo, mn) in _oracle_vs_network(s, truth, residuals).items():
        assert mo <= mn, name


@pytest.mark.slow
def test_oracle_mse_not_worse_than_networks_across_seeds():
    for seed in range(10):
        rec, truth = simgen.simulate(simgen.SimConfig(seed=seed, **SMALL))
        s = dml.dml_sample(panel.derive(rec))
        feats = textfeat.featurize(s["response_text"].tolist())
        _, residuals = dml.run(s, feats.matrix, seed=seed, config=FAST, batch_norm=False,
                               weak_floor=0.0, estimation_share=0.3)
        for name, (mo, mn) in _oracle_vs_network(s, truth, residuals).items():
            assert mo <= mn, (seed, name, mo, mn)


def test_constant_outcome_network_predicts_constant():
    rng = np.random.default_rng(0)
    n = 200
    f = pd.DataFrame({"opinion_id": np.arange(n) % 10, "outcome": np.zeros(n),
                      "instrument": rng.uniform(1, 4, n), "reputation": rng.poisson(2, n),
                      "skill": rng.uniform(1, 20, n), "position_std": rng.normal(size=n)})
    X = np.abs(rng.normal(size=(n, 4)))
    plan = dml.make_split(f, 0, estimation_share=0.5)
    ns = dml.fit_nuisances(f, X, plan, config=FAST.replace(max_iterations=50), hidden_width=4,
                           batch_norm=False)
    pred = ns.networks["outcome"].predict(sp_rows(X, plan.inference))
    assert np.max(pred) < 1e-3
    assert ns.networks["outcome"].report.final_val_loss < 1e-3


def sp_rows(X, rows):
    import scipy.sparse as sp
    return sp.csr_matrix(X)[rows]


def test_cross_fit_predicts_every_row_out_of_fold(small_run):
    s, feats, *_ = small_run
    X = dml.build_inputs(s, feats.matrix)
    residuals, sets = dml.cross_fit(s, X, seed=2, folds=2, config=FAST.replace(max_iterations=30),
                                    hidden_width=feats.matrix.shape[1], batch_norm=False)
    assert len(residuals) == len(s) and len(sets) == 2
    assert set(residuals["fold"]) == {0, 1}
    assert np.isfinite(residuals[["y_res", "z_res", "r_res"]].to_numpy()).all()

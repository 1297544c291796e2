from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_records, records_from
from debateiv import panel
from debateiv.errors import DegenerateBinsError, StructuralInputError


# ---------------------------------------------------------------------------
# brute-force oracles: loop over rows, look back at the user's earlier rows

def oracle_history(records: pd.DataFrame, s_mu: float = 0.016) -> pd.DataFrame:
    rows = records.reset_index(drop=True)
    pos = (rows["arrival_index"] + 1).tolist()
    out = []
    for i in range(len(rows)):
        earlier = [j for j in range(i) if rows.at[j, "user_id"] == rows.at[i, "user_id"]]
        later = [j for j in range(i + 1, len(rows)) if rows.at[j, "user_id"] == rows.at[i, "user_id"]]
        wins = sum(int(rows.at[j, "outcome"]) for j in earlier)
        rep = wins + sum(int(rows.at[j, "nonposter_deltas"]) for j in earlier)
        skill = 100.0 * (wins + 2 * s_mu) / (len(earlier) + 2)
        z = sum(pos[j] for j in earlier) / len(earlier) if earlier else math.nan
        out.append((pos[i], rep, skill, z, len(earlier), int(len(later) >= 2)))
    return pd.DataFrame(out, columns=["position", "reputation", "skill", "instrument",
                                      "experience", "future_participation"])


@pytest.mark.parametrize("n_rows, seed", [(50, 0), (137, 3), (500, 7)])
def test_derived_columns_match_brute_force(n_rows, seed):
    rec = random_records(n_rows, n_users=12, n_opinions=15, seed=seed)
    got = panel.derive(rec)
    want = oracle_history(rec)
    np.testing.assert_array_equal(got["position"], want["position"])
    np.testing.assert_array_equal(got["reputation"], want["reputation"])
    np.testing.assert_array_equal(got["experience"], want["experience"])
    np.testing.assert_array_equal(got["future_participation"], want["future_participation"])
    np.testing.assert_allclose(got["skill"], want["skill"], rtol=0, atol=1e-12)
    np.testing.assert_allclose(got["instrument"], want["instrument"], rtol=0, atol=1e-12)
    assert got["instrument"].isna().equals(got["experience"] == 0)


def test_positions_in_arrival_order():
    rec = random_records(3, n_users=3, n_opinions=1)
    assert panel.compute_position(rec).tolist() == [1, 2, 3]


def test_duplicate_arrival_index_is_structural_error(records):
    bad = records.copy()
    first = bad.index[bad["opinion_id"] == bad.at[1, "opinion_id"]]
    bad.loc[first[1], "arrival_index"] = bad.loc[first[0], "arrival_index"]
    with pytest.raises(StructuralInputError):
        panel.compute_position(bad)
    with pytest.raises(StructuralInputError):
        panel.validate_records(bad)


def test_reputation_counts_poster_and_nonposter_deltas():
    rec = random_records(4, n_users=1, n_opinions=4)
    rec["outcome"] = [1, 0, 1, 0]
    rec["nonposter_deltas"] = [0, 0, 1, 0]
    rec["tree_len"] = 3
    d = panel.derive(rec)
    assert d["reputation"].tolist() == [0, 1, 1, 3]


@pytest.mark.parametrize("prior, wins, expected", [(0, 0, 1.6), (3, 1, 20.64)])
def test_skill_examples(prior, wins, expected):
    rec = random_records(prior + 1, n_users=1, n_opinions=prior + 1)
    rec["outcome"] = [1] * wins + [0] * (prior - wins) + [0]
    rec["tree_len"] = 3
    assert panel.derive(rec)["skill"].iloc[-1] == pytest.approx(expected, abs=1e-12)


def test_skill_limit_is_success_fraction():
    n = 4000
    rec = random_records(n + 1, n_users=1, n_opinions=50, seed=2)
    rec["outcome"] = (np.arange(n + 1) % 4 == 0).astype(int)
    rec["tree_len"] = 3
    s = panel.derive(rec)["skill"].iloc[-1]
    assert abs(s - 25.0) < 0.05


def test_instrument_examples():
    # the user answers opinion A third, opinion B seventh, then opinion C
    pairs = [("A", "x1"), ("A", "x2"), ("A", "me")]
    pairs += [("B", f"y{i}") for i in range(6)] + [("B", "me"), ("C", "me")]
    d = panel.derive(records_from(pairs))
    mine = d[d["user_id"] == "me"]
    assert mine["position"].tolist() == [3, 7, 1]
    assert np.isnan(mine["instrument"].iloc[0])
    assert mine["instrument"].tolist()[1:] == [3.0, 5.0]


def test_future_participation_flags():
    rec = random_records(5, n_users=1, n_opinions=5)
    d = panel.derive(rec)
    assert d["future_participation"].tolist() == [1, 1, 1, 0, 0]
    assert d["experience"].tolist() == [0, 1, 2, 3, 4]


def test_standardize_matches_two_pass_moments():
    x = np.array([1.0, 2.0, 2.0, 3.0, 5.0, 8.0])
    mean = sum(x) / 6
    var = sum((v - mean) ** 2 for v in x) / 5
    z, meta = panel.standardize(x)
    np.testing.assert_allclose(z, (x - mean) / math.sqrt(var), atol=1e-12)
    assert meta["mean"] == pytest.approx(mean, abs=1e-15)
    z1, _ = panel.standardize([4.0])
    assert z1.tolist() == [0.0]


def test_deleted_users_dropped_or_reset():
    rec = random_records(120, seed=4, deleted_share=0.2)
    n_del = int(rec["deleted_user"].sum())
    assert len(panel.derive(rec)) == len(rec) - n_del
    kept = panel.derive(rec, keep_deleted=True)
    gone = kept[kept["deleted_user"] == 1]
    assert (gone["reputation"] == 0).all() and (gone["skill"] == 1.6).all()
    assert gone["instrument"].isna().all()
    # positions count deleted challengers too
    np.testing.assert_array_equal(kept["position"], rec["arrival_index"] + 1)


def test_tree_length_invariant_enforced(records):
    bad = records.copy()
    bad.loc[bad["outcome"] == 1, "tree_len"] = 1
    with pytest.raises(StructuralInputError):
        panel.validate_records(bad)


def test_fe_sample_examples():
    rec = random_records(4, n_users=4, n_opinions=1)
    rec.loc[0, "opinion_id"] = "solo"
    rec.loc[1:, "arrival_index"] = [0, 1, 2]
    d = panel.derive(rec)
    out, dropped = panel.fe_sample(d)
    assert (len(out), dropped) == (3, 1)
    assert out.attrs["fe_dropped"] == 1
    again, dropped2 = panel.fe_sample(out)
    assert dropped2 == 0 and again.equals(out)


def test_bin_quantiles_examples():
    assert panel.bin_quantiles(np.arange(1, 9), 4).labels.tolist() == [1, 1, 2, 2, 3, 3, 4, 4]
    b = panel.bin_quantiles([5, 1, 3, 9], 2)
    assert b.labels.tolist() == [2, 1, 1, 2]
    with pytest.raises(DegenerateBinsError):
        panel.bin_quantiles([2.0] * 10, 3)


def test_bin_quantiles_balanced_on_uniform_draws():
    x = np.random.default_rng(5).random(1000)
    bins = panel.bin_quantiles(x, 4)
    # sort oracle: the i-th quarter of the sorted sample is bin i
    order = np.argsort(x, kind="stable")
    oracle = np.empty(1000, dtype=int)
    oracle[order] = np.repeat([1, 2, 3, 4], 250)
    assert np.all(np.abs(bins.counts() - 250) <= 1)
    assert np.mean(bins.labels == oracle) > 0.99


def test_describe_correlations_match_textbook_formula():
    rec = random_records(300, n_users=20, n_opinions=30, seed=6)
    d = panel.derive(rec)
    rep = panel.describe(d)
    names = rep["correlation"]["variables"]
    mat = rep["correlation"]["matrix"]
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            x, y = d[a].to_numpy(float), d[b].to_numpy(float)
            ok = ~(np.isnan(x) | np.isnan(y))
            x, y = x[ok], y[ok]
            n = len(x)
            cov = (np.sum(x * y) - n * x.mean() * y.mean()) / (n - 1)
            oracle = cov / (x.std(ddof=1) * y.std(ddof=1))
            assert mat[i][j] == pytest.approx(oracle, abs=1e-10)
    assert set(rep["variables"]) == set(panel.DESCRIBE_VARIABLES)
    assert rep["counts"]["debates"] == len(d)
    assert "fe_dropped" in rep


def test_describe_constant_column_is_undefined():
    rec = random_records(30, n_users=30, n_opinions=30, seed=2)
    rec["user_id"] = [f"x{i}" for i in range(30)]  # nobody has history
    d = panel.derive(rec)
    corr = panel.describe(d)["correlation"]
    i = corr["variables"].index("reputation")
    assert all(v is None for v in corr["matrix"][i])


def test_csv_round_trip(tmp_path, records):
    path = tmp_path / "records.csv"
    panel.write_records(records, path)
    back = panel.read_records(path)
    pd.testing.assert_frame_equal(panel.derive(back), panel.derive(records), check_dtype=False)
    jl = tmp_path / "records.jsonl"
    panel.write_records(records, jl)
    pd.testing.assert_frame_equal(panel.derive(panel.read_records(jl)), panel.derive(records),
                                  check_dtype=False)


# ---------------------------------------------------------------------------
# properties

@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=5, max_value=120), st.integers(min_value=0, max_value=10_000))
def test_reputation_monotone_and_skill_bounded(n_rows, seed):
    d = panel.derive(random_records(n_rows, n_users=5, n_opinions=9, seed=seed))
    for _, g in d.groupby("user_id"):
        assert (np.diff(g["reputation"].to_numpy()) >= 0).all()
    assert ((d["skill"] > 0) & (d["skill"] < 100)).all()
    assert (d.loc[d["experience"] == 0, "skill"] == 1.6).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=20), st.integers(min_value=1, max_value=20),
       st.floats(min_value=0.001, max_value=0.999))
def test_skill_monotone_in_successes(wins, extra, s_mu):
    n = wins + extra
    lo = (wins + 2 * s_mu) / (n + 2)
    rec = random_records(n + 1, n_users=1, n_opinions=n + 1)
    rec["tree_len"] = 3
    rec["outcome"] = [1] * wins + [0] * extra + [0]
    s_lo = panel.derive(rec, s_mu=s_mu)["skill"].iloc[-1]
    rec["outcome"] = [1] * (wins + 1) + [0] * (extra - 1) + [0]
    s_hi = panel.derive(rec, s_mu=s_mu)["skill"].iloc[-1]
    assert s_lo == pytest.approx(100 * lo, abs=1e-12)
    assert s_hi > s_lo


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), min_size=4, max_size=200),
       st.integers(min_value=2, max_value=4))
def test_bins_partition_sample(values, k):
    try:
        bins = panel.bin_quantiles(values, k)
    except DegenerateBinsError:
        return
    assert bins.counts().sum() == len(values)
    assert set(bins.labels.tolist()) == set(range(1, k + 1))
    assert np.all(np.diff(bins.cut_points) >= 0)

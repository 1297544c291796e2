from __future__ import annotations

import numpy as np
import pandas as pd
import pytest


def random_records(n_rows: int, n_users: int = 8, n_opinions: int = 10, seed: int = 0,
                   deleted_share: float = 0.0) -> pd.DataFrame:
    """Chronologically ordered debate records with valid arrival indices.

    Opinions are interleaved at random, so a user's sequence mixes opinions
    and the arrival index of an opinion counts its earlier rows.
    """
    rng = np.random.default_rng(seed)
    opinion = rng.integers(0, n_opinions, n_rows)
    user = rng.integers(0, n_users, n_rows)
    outcome = rng.integers(0, 2, n_rows)
    arrival = pd.Series(opinion).groupby(opinion).cumcount().to_numpy()
    tree = np.where(outcome == 1, rng.integers(2, 9, n_rows), rng.integers(1, 9, n_rows))
    words = np.array(["argument", "evidence", "because", "economy", "policy", "people", "think"])
    texts = [" ".join(rng.choice(words, rng.integers(1, 6))) for _ in range(n_rows)]
    return pd.DataFrame({
        "opinion_id": [f"o{o}" for o in opinion],
        "user_id": [f"u{u}" for u in user],
        "arrival_index": arrival,
        "month": [f"2020-{1 + o % 12:02d}" for o in opinion],
        "outcome": outcome,
        "nonposter_deltas": rng.poisson(0.4, n_rows),
        "response_text": texts,
        "opinion_text_len": rng.integers(50, 500, n_rows),
        "response_text_len": [len(t) for t in texts],
        "multi_party": rng.integers(0, 2, n_rows),
        "tree_len": tree,
        "deleted_user": (rng.random(n_rows) < deleted_share).astype(int),
    })


def records_from(pairs, outcome=None, nonposter=None) -> pd.DataFrame:
    """Records from chronological ``(opinion, user)`` pairs; arrival indices follow."""
    n = len(pairs)
    base = random_records(n, seed=0)
    base["opinion_id"] = [str(o) for o, _ in pairs]
    base["user_id"] = [str(u) for _, u in pairs]
    base["arrival_index"] = base.groupby("opinion_id", sort=False).cumcount()
    if outcome is not None:
        base["outcome"] = outcome
    if nonposter is not None:
        base["nonposter_deltas"] = nonposter
    base["tree_len"] = 3
    return base


@pytest.fixture
def records():
    return random_records(200, seed=1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo checks that take more than a few seconds")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from evcsguard.errors import ConfigError, SearchFault
from evcsguard.tuning import (REFERENCE_CONFIGS, SearchSpace, confusion, early_detection_probe, evaluate,
                              format_hyperparameters, format_table, leaderboard_csv, metrics_from_confusion,
                              perturb, random_search, rank, refine_search, validation_split)

TINY = SearchSpace(learning_rate=(1e-3, 1e-2), dropout=(0.1, 0.2), batch=(16, 32), units=(4, 6),
                   epochs=(1, 1), filters=(2, 2), kernel=(3, 3))


def test_metric_example_high():
    m = metrics_from_confusion(TP=1003, FN=9, TN=985, FP=3)
    assert m.accuracy == pytest.approx(99.400, abs=5e-4)
    assert m.f_measure == pytest.approx(99.405, abs=5e-4)
    assert m.recall == pytest.approx(99.111, abs=5e-4)
    assert m.precision == pytest.approx(99.702, abs=5e-4)


def test_metric_example_low():
    m = metrics_from_confusion(TP=972, FN=40, TN=978, FP=10)
    assert m.accuracy == pytest.approx(97.5, abs=5e-4)
    # exact harmonic mean is 2TP / (2TP + FP + FN) = 1944 / 1994
    assert m.f_measure == pytest.approx(1944 / 1994 * 100, rel=1e-12)
    assert m.f_measure == pytest.approx(97.493, abs=1e-3)


def test_metric_degenerate_and_negative():
    m = metrics_from_confusion(0, 0, 10, 0)
    assert (m.precision, m.recall, m.f_measure, m.accuracy) == (0.0, 0.0, 0.0, 100.0)
    with pytest.raises(ConfigError):
        metrics_from_confusion(-1, 0, 0, 0)


counts = st.integers(0, 5000)


@given(counts, counts, counts, counts)
def test_metric_identities(tp, fn, tn, fp):
    m = metrics_from_confusion(tp, fn, tn, fp)
    assert m.total == tp + fn + tn + fp
    for v in m.scores().values():
        assert 0.0 <= v <= 100.0
    if 2 * tp + fp + fn:
        assert m.f_measure == pytest.approx(100.0 * 2 * tp / (2 * tp + fp + fn))
    lo, hi = sorted((m.precision, m.recall))
    assert lo - 1e-9 <= m.f_measure <= hi + 1e-9


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), max_size=50))
def test_confusion_counts(pairs):
    y = [a for a, _ in pairs]
    p = [b for _, b in pairs]
    cm = confusion(y, p)
    assert sum(cm.values()) == len(pairs)
    assert cm["TP"] + cm["FN"] == sum(y)


def test_metrics_json_excludes_timing_on_request():
    m = metrics_from_confusion(5, 1, 3, 2, training_time=1.5, mean_prediction_time=0.01)
    assert "timing" not in m.to_json(include_timing=False)
    assert "training_time_s" in m.to_json()


def test_search_space_validation_and_sampling():
    with pytest.raises(ConfigError):
        SearchSpace(dropout=(0.5, 0.1))
    with pytest.raises(ConfigError):
        SearchSpace(learning_rate=(0.0, 0.1))
    with pytest.raises(ConfigError):
        SearchSpace().keys("gru")
    space = SearchSpace()
    rng = np.random.default_rng(0)
    for fam in ("lstm", "convlstm"):
        for _ in range(200):
            hp = space.sample(fam, rng)
            assert space.contains(fam, hp)
            for k, v in hp.items():
                assert isinstance(v, int) == space.is_int(k)


def test_reference_configs_inside_default_space():
    space = SearchSpace()
    for (fam, _), hp in REFERENCE_CONFIGS.items():
        assert space.contains(fam, hp)


@given(st.floats(0.0, 0.5), st.integers(0, 2 ** 31))
def test_perturb_stays_in_range(radius, seed):
    space = SearchSpace()
    best = REFERENCE_CONFIGS[("convlstm", 5)]
    hp = perturb(space, "convlstm", best, radius, np.random.default_rng(seed))
    assert space.contains("convlstm", hp)
    for k, v in hp.items():
        assert isinstance(v, int) == space.is_int(k)
        if not space.is_int(k):
            assert abs(v - best[k]) <= radius * abs(best[k]) + 1e-12


def test_perturb_radius_zero_is_identity():
    space = SearchSpace()
    best = REFERENCE_CONFIGS[("lstm", 10)]
    hp = perturb(space, "lstm", best, 0.0, np.random.default_rng(0))
    assert all(hp[k] == best[k] for k in hp)


def test_rank_ties_and_nan():
    board = [dict(index=0, f_measure=90.0, FN=3), dict(index=1, f_measure=float("nan"), FN=None),
             dict(index=2, f_measure=90.0, FN=1), dict(index=3, f_measure=95.0, FN=9)]
    assert [e["index"] for e in rank(board)] == [3, 2, 0, 1]


@pytest.fixture(scope="module")
def tv(small_split):
    return validation_split(small_split[0], 0.2, seed=0)


def test_validation_split_stratified(tv, small_split):
    tr, val = tv
    assert len(tr) + len(val) == len(small_split[0])
    assert abs(val.labels.mean() - small_split[0].labels.mean()) < 0.1


def test_random_search_deterministic(tv):
    tr, val = tv
    a, board_a = random_search(TINY, "lstm", tr, val, n=2, seed=4)
    b, board_b = random_search(TINY, "lstm", tr, val, n=2, seed=4)
    assert leaderboard_csv(board_a) == leaderboard_csv(board_b)
    assert a["params"] == b["params"] and len(board_a) == 2
    f = [e["f_measure"] for e in board_a]
    assert f == sorted(f, reverse=True)


def test_random_search_single_trial(tv):
    tr, val = tv
    best, board = random_search(TINY, "lstm", tr, val, n=1, seed=1)
    assert board == [best] and best["index"] == 0
    with pytest.raises(ConfigError):
        random_search(TINY, "lstm", tr, val, n=0)


def test_refine_never_worse(tv):
    tr, val = tv
    best, _ = random_search(TINY, "lstm", tr, val, n=1, seed=1)
    top, board = refine_search(best, TINY, "lstm", tr, val, n=1, radius=0.0, seed=1)
    assert top["f_measure"] >= best["f_measure"]
    assert {e["index"] for e in board} == {-1, 0}
    assert all(e["params"] == best["params"] for e in board)
    with pytest.raises(ConfigError):
        refine_search(best, TINY, "lstm", tr, val, n=1, radius=-0.1)


def test_all_diverged_raises(tv):
    tr, val = tv
    bad = SearchSpace(learning_rate=(1e6, 1e6), dropout=(0.1, 0.1), batch=(16, 16), units=(4, 4),
                      epochs=(1, 1))
    x = tr.freq_hz.copy()
    try:
        tr.freq_hz[:] = np.nan
        with pytest.raises(SearchFault):
            random_search(bad, "lstm", tr, val, n=1)
    finally:
        tr.freq_hz[:] = x


def test_leaderboard_csv_nan_row(tmp_path):
    board = [dict(index=0, f_measure=float("nan"), FN=None, params={"a": 1}, status="diverged")]
    text = leaderboard_csv(board, tmp_path / "b.csv")
    assert "nan" in text and (tmp_path / "b.csv").read_text() == text


def test_evaluate_and_probe(tiny_checkpoint, small_split):
    te = small_split[1]
    m = evaluate(tiny_checkpoint, te)
    assert m.total == len(te)
    assert m.mean_prediction_time > 0
    normal_only = te.subset(np.flatnonzero(te.labels == 0))
    probe = early_detection_probe(tiny_checkpoint, normal_only)
    assert probe["recall"] is None and probe["recall_display"] == "N/A"
    assert probe["n_attack"] == 0 and probe["false_positives"] <= probe["n_normal"]


def test_tables_render():
    r = {"LSTM": metrics_from_confusion(1003, 9, 985, 3, 12.0, 0.004),
         "ConvLSTM": metrics_from_confusion(972, 40, 978, 10)}
    t = format_table(r)
    assert "99.405" in t and "97.492" in t and "-" in t
    h = format_hyperparameters({"LSTM": REFERENCE_CONFIGS[("lstm", 5)]})
    assert "0.014717" in h

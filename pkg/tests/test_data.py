import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stocktl import data as D
from conftest import make_panel


# --- csv -------------------------------------------------------------------

def test_csv_empty_cell_is_non_member(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("date,AAA,BBB\n2020-01-01,0.01,0.02\n2020-01-02,,0.01\n2020-01-03,0.0,-0.01\n")
    panel = D.load_returns_csv(p)
    assert panel.n_days == 3 and panel.n_stocks == 2
    assert not panel.membership[1, 0]
    assert panel.membership.sum() == 5
    assert math.isnan(panel.returns[1, 0])


def test_csv_duplicate_date(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("date,AAA\n2020-01-01,0.01\n2020-01-01,0.02\n")
    with pytest.raises(D.PanelError, match="duplicate date"):
        D.load_returns_csv(p)


def test_csv_bad_cell_names_line(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("date,AAA\n2020-01-01,0.01\n2020-01-02,abc\n")
    with pytest.raises(D.PanelError, match="line 3"):
        D.load_returns_csv(p)


def test_csv_roundtrip(tmp_path, small_panel):
    p = tmp_path / "panel.csv"
    D.write_returns_csv(small_panel, p)
    back = D.load_returns_csv(p)
    assert back.tickers == small_panel.tickers
    assert back.dates == small_panel.dates
    np.testing.assert_array_equal(back.membership, small_panel.membership)
    np.testing.assert_array_equal(back.returns[back.membership],
                                  small_panel.returns[small_panel.membership])


def test_panel_is_read_only(small_panel):
    with pytest.raises(ValueError):
        small_panel.returns[0, 0] = 1.0


# --- generator -------------------------------------------------------------

def test_generator_deterministic():
    a = D.generate_synthetic_panel(300, 30, 0.5, seed=9)
    b = D.generate_synthetic_panel(300, 30, 0.5, seed=9)
    assert a.returns.tobytes() == b.returns.tobytes()
    c = D.generate_synthetic_panel(300, 30, 0.5, seed=10)
    assert a.returns.tobytes() != c.returns.tobytes()


def test_generator_zero_signal_has_no_autocorrelation():
    panel = D.generate_synthetic_panel(2000, 40, 0.0, seed=1)
    r = panel.returns
    lag = np.corrcoef(r[1:].ravel(), r[:-1].ravel())[0, 1]
    assert abs(lag) < 0.02


def test_generator_signal_is_predictive():
    panel = D.generate_synthetic_panel(2000, 40, 0.5, seed=1)
    r = panel.returns
    # recent winners keep winning: next-day return correlates with a trailing EW sum
    past = sum(0.8 ** k * r[10 - k - 1:-k - 1] for k in range(10))
    corr = np.corrcoef(past.ravel(), r[10:].ravel())[0, 1]
    assert corr > 0.05


# --- splits and standardization -------------------------------------------

@pytest.mark.parametrize("n_days,expected", [(1000, 1), (1500, 3), (7000, 25), (1249, 1), (1250, 2)])
def test_split_count(n_days, expected):
    panel = make_panel(np.random.default_rng(0).normal(0, 0.01, (n_days, 3)))
    splits = D.generate_splits(panel)
    assert len(splits) == expected


def test_split_geometry():
    panel = make_panel(np.random.default_rng(0).normal(0, 0.01, (1500, 3)))
    splits = D.generate_splits(panel)
    assert [s.start for s in splits] == [0, 250, 500]
    for s in splits:
        assert len(s.train_day_range) == 750 and len(s.test_day_range) == 250
        assert s.train_day_range.stop == s.test_day_range.start
        assert s.sigma_train > 0


def test_split_stats_use_train_region_only():
    rng = np.random.default_rng(1)
    r = rng.normal(0, 0.01, (1000, 4))
    r[750:] += 5.0  # test region shifted far away
    panel = make_panel(r)
    (s,) = D.generate_splits(panel)
    assert s.mu_train == pytest.approx(r[:750].mean(), abs=1e-15)
    assert s.sigma_train == pytest.approx(r[:750].std(), rel=1e-12)


def test_split_too_short():
    panel = make_panel(np.zeros((999, 2)) + np.arange(2) * 0.01)
    with pytest.raises(D.PanelError):
        D.generate_splits(panel)


def test_degenerate_split():
    panel = make_panel(np.full((1000, 3), 0.01))
    with pytest.raises(D.DegenerateSplitError):
        D.generate_splits(panel)


def test_standardize_examples():
    s = D.StudyPeriod(0, 0, 750, 250, 0.001, 0.02)
    assert D.standardize(0.001, s) == 0.0
    assert D.standardize(0.021, s) == pytest.approx(1.0, abs=1e-12)


@given(st.floats(-1.0, 1.0), st.floats(-0.01, 0.01), st.floats(1e-4, 0.1))
def test_standardize_roundtrip(v, mu, sigma):
    s = D.StudyPeriod(0, 0, 750, 250, mu, sigma)
    assert abs(D.destandardize(D.standardize(v, s), s) - v) < 1e-12


# --- labels ----------------------------------------------------------------

def test_binary_median_examples():
    panel = make_panel([[0.01, 0.02, 0.03]])
    assert list(D.label_binary_median(panel, 0).values()) == [0, 0, 1]
    panel = make_panel([[0.01, 0.01, 0.01]])
    assert list(D.label_binary_median(panel, 0).values()) == [0, 0, 0]
    panel = make_panel([[-0.01, 0.04]])
    assert list(D.label_binary_median(panel, 0).values()) == [0, 1]


@given(st.lists(st.integers(-50, 50), min_size=1, max_size=40))
def test_binary_label_one_count_bound(values):
    panel = make_panel([np.array(values, dtype=float) / 1000])
    labels = D.label_binary_median(panel, 0)
    assert sum(labels.values()) <= len(values) // 2


def test_ternary_21_stocks():
    panel = make_panel([np.linspace(-0.05, 0.05, 21)])
    counts = {}
    for v in D.label_ternary_topk(panel, 0, 10).values():
        counts[v] = counts.get(v, 0) + 1
    assert counts == {"buy": 10, "sell": 10, "nothing": 1}


def test_ternary_top3_of_30():
    r = np.random.default_rng(4).permutation(np.arange(30)) / 1000.0
    panel = make_panel([r])
    labels = D.label_ternary_topk(panel, 0, 3)
    top = {panel.tickers[j] for j in np.argsort(r)[-3:]}
    bottom = {panel.tickers[j] for j in np.argsort(r)[:3]}
    assert {t for t, v in labels.items() if v == "buy"} == top
    assert {t for t, v in labels.items() if v == "sell"} == bottom


def test_ternary_ties_broken_by_ticker():
    panel = make_panel([[0.0] * 5], tickers=["E", "D", "C", "B", "A"])
    labels = D.label_ternary_topk(panel, 0, 2)
    assert labels["A"] == "sell" and labels["B"] == "sell"
    assert labels["D"] == "buy" and labels["E"] == "buy"


def test_ternary_too_few_members():
    panel = make_panel([np.arange(20) / 100])
    with pytest.raises(D.PanelError):
        D.label_ternary_topk(panel, 0, 10)


@settings(max_examples=30, deadline=None)
@given(st.integers(21, 60), st.integers(0, 10_000))
def test_ternary_counts_property(m, seed):
    rng = np.random.default_rng(seed)
    r = np.round(rng.normal(0, 0.01, (3, m)), 3)  # rounding forces ties
    _, tern = D.label_arrays(make_panel(r), 10)
    for row in tern:
        assert np.sum(row == D.BUY) == 10 and np.sum(row == D.SELL) == 10
        assert np.sum(row == D.NOTHING) == m - 20


def test_label_arrays_match_dict_versions(small_panel):
    binary, ternary = D.label_arrays(small_panel, 10)
    for day in (0, 17, 500):
        b = D.label_binary_median(small_panel, day)
        t = D.label_ternary_topk(small_panel, day, 10)
        for j, tick in enumerate(small_panel.tickers):
            assert binary[day, j] == b[tick]
            assert D.TERNARY_NAMES[ternary[day, j]] == t[tick]


# --- sequences -------------------------------------------------------------

def test_sequence_counts_full_membership():
    panel = make_panel(np.random.default_rng(0).normal(0, 0.01, (1000, 5)))
    (s,) = D.generate_splits(panel)
    train = D.build_sequences(panel, s, "train", k=1)
    test = D.build_sequences(panel, s, "test", k=1)
    # targets t+1 in [240, 750) for train, [750, 1000) for test
    assert len(train) == (750 - 240) * 5
    assert len(test) == 250 * 5
    assert train.windows.shape == (len(train), 240)


def test_sequence_window_content():
    rng = np.random.default_rng(2)
    r = rng.normal(0, 0.01, (1000, 3))
    panel = make_panel(r)
    (s,) = D.generate_splits(panel)
    seqs = D.build_sequences(panel, s, "test", k=1)
    i = 7
    stock, t = seqs.stock[i], seqs.end_day[i]
    expected = (r[t - 239:t + 1, stock] - s.mu_train) / s.sigma_train
    np.testing.assert_allclose(seqs.windows[i], expected, rtol=0, atol=1e-12)
    assert seqs.next_return[i] == r[t + 1, stock]


def test_sequence_excludes_missing_day():
    r = np.random.default_rng(3).normal(0, 0.01, (1000, 3))
    member = np.ones_like(r, dtype=bool)
    member[500, 1] = False
    panel = make_panel(r, member)
    (s,) = D.generate_splits(panel)
    seqs = D.build_sequences(panel, s, "train", k=1)
    for stock, t in zip(seqs.stock, seqs.end_day):
        if stock == 1:
            assert not (t - 239 <= 500 <= t + 1)
    n_stock1 = np.sum(seqs.stock == 1)
    # windows touching day 500 through window or target: end days 499..739
    assert n_stock1 == (750 - 240) - (739 - 499 + 1)


def test_train_sequences_stay_inside_train_region():
    panel = D.generate_synthetic_panel(1500, 25, 0.5, seed=1)
    for s in D.generate_splits(panel):
        seqs = D.build_sequences(panel, s, "train")
        assert seqs.end_day.min() - 239 >= s.start
        assert seqs.end_day.max() + 1 < s.train_day_range.stop
        assert np.all(np.isfinite(seqs.windows))


def test_chronological_split_100_days():
    n = 100
    panel = make_panel(np.random.default_rng(0).normal(0, 0.01, (1000, 2)))
    (s,) = D.generate_splits(panel)
    seqs = D.build_sequences(panel, s, "train", k=0)
    days = np.unique(seqs.end_day)[:n]
    sub = seqs.subset(np.isin(seqs.end_day, days))
    tr, va = D.chronological_train_val_split(sub, 0.2)
    assert np.array_equal(np.unique(va.end_day), days[80:])
    assert not set(tr.end_day) & set(va.end_day)
    tr0, va0 = D.chronological_train_val_split(sub, 0.0)
    assert len(va0) == 0 and len(tr0) == len(sub)


def test_balanced_sampler_ternary_counts():
    labels = np.array([0] * 10 + [1] * 10 + [2] * 480)
    labels = np.tile(labels, 20)  # 10k samples, 10:10:480 proportions
    batches = list(D.balanced_batch_stream(labels, 128, seed=5))
    assert len(batches) == math.ceil(labels.size / 128)
    drawn = labels[np.concatenate(batches)]
    n = drawn.size
    for c in range(3):
        expected = n / 3
        sd = math.sqrt(n * (1 / 3) * (2 / 3))
        assert abs(np.sum(drawn == c) - expected) < 2.576 * sd
    per_batch = np.array([[np.sum(labels[b] == c) for c in range(3)] for b in batches])
    assert abs(per_batch.mean() - 128 / 3) < 1.0
    # binomial 99% band per batch is about +/-14, so only a few batches may stray past 15
    assert np.mean(np.abs(per_batch - 128 / 3) <= 15) > 0.97


def test_balanced_sampler_deterministic():
    labels = np.array([0, 1] * 300)
    a = list(D.balanced_batch_stream(labels, 64, seed=1))
    b = list(D.balanced_batch_stream(labels, 64, seed=1))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_balanced_sampler_missing_class():
    with pytest.raises(ValueError, match="absent"):
        list(D.balanced_batch_stream(np.array([0, 0, 2]), 4, n_classes=3))

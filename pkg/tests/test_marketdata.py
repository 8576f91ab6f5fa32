import datetime as dt
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from indexgan import marketdata as md
from indexgan.pipeline import random_walk_prices

import oracles


def _csv(rows, header="Date,Open,High,Low,Close,Adj Close,Volume"):
    return (header + "\n" + "\n".join(rows) + "\n").encode()


def _series(close, vol=None):
    close = np.asarray(close, dtype=float)
    n = close.size
    dates = tuple(dt.date(2020, 1, 1) + dt.timedelta(days=i) for i in range(n))
    s = md.PriceSeries(dates, close.copy(), close * 1.01, close * 0.99, close.copy())
    return s, (np.full(n, 20.0) if vol is None else np.asarray(vol, dtype=float))


# ---------------------------------------------------------------------------
# parsing


def test_parse_two_rows():
    s = md.parse_ohlc_csv(_csv(["2020-01-02,99,101,98,100,100,5", "2020-01-03,100,111,99,110,110,6"]))
    assert len(s) == 2
    assert s.close.tolist() == [100.0, 110.0]


def test_parse_sorts_rows():
    s = md.parse_ohlc_csv(_csv(["2020-01-03,1,2,1,2,2,0", "2020-01-02,1,2,1,1.5,1,0"]))
    assert s.dates == (dt.date(2020, 1, 2), dt.date(2020, 1, 3))
    assert s.close.tolist() == [1.5, 2.0]


def test_parse_accepts_stream():
    s = md.parse_ohlc_csv(io.BytesIO(_csv(["2020-01-02,1,2,1,1.5,1,0"])))
    assert len(s) == 1


def test_parse_missing_close_names_column():
    with pytest.raises(md.SchemaError, match="Close"):
        md.parse_ohlc_csv(_csv(["2020-01-02,1,2,1"], header="Date,Open,High,Low"))


def test_parse_bad_number_reports_line():
    with pytest.raises(md.RowError) as err:
        md.parse_ohlc_csv(_csv(["2020-01-02,1,2,1,1.5,1,0", "2020-01-03,1,abc,1,1.5,1,0"]))
    assert err.value.line == 3


def test_parse_bad_date_reports_line():
    with pytest.raises(md.RowError) as err:
        md.parse_ohlc_csv(_csv(["02/01/2020,1,2,1,1.5,1,0"]))
    assert err.value.line == 2


def test_parse_empty_file():
    with pytest.raises(ValueError):
        md.parse_ohlc_csv(b"")
    with pytest.raises(ValueError):
        md.parse_ohlc_csv(_csv([]))


def test_parse_volatility():
    dates, vals = md.parse_volatility_csv(b"Date,Open,Close\n2020-01-03,1,25\n2020-01-02,1,20\n")
    assert dates == (dt.date(2020, 1, 2), dt.date(2020, 1, 3))
    assert vals.tolist() == [20.0, 25.0]


# ---------------------------------------------------------------------------
# per-day ratios and targets


def test_price_and_vol_features():
    s, _ = _series([100.0, 110.0])
    f = md.price_and_vol_features(s, np.array([20.0, 25.0]))
    assert f.shape == (1, 5)
    assert f[0, 3] == pytest.approx(0.10, abs=1e-15)
    # volatility enters as a plain ratio
    assert f[0, 4] == 1.25


def test_constant_series_has_zero_returns():
    s, vol = _series(np.full(10, 50.0))
    f = md.price_and_vol_features(s, vol)
    assert np.all(f[:, :4] == 0)
    assert np.all(f[:, 4] == 1)


def test_zero_previous_price_is_an_error():
    s, vol = _series([0.0, 1.0, 2.0])
    with pytest.raises(ZeroDivisionError):
        md.price_and_vol_features(s, vol)


@pytest.mark.parametrize("close, ret, mv", [
    ([100, 103], 0.03, 1),
    ([100, 100], 0.0, -1),
    ([100, 95], -0.05, -1),
])
def test_target_returns(close, ret, mv):
    c, m = md.target_returns(close)
    assert c[0] == pytest.approx(ret, abs=1e-15)
    assert m[0] == mv


# ---------------------------------------------------------------------------
# indicators


def test_rsi_saturates_on_rising_series():
    close = np.arange(1.0, 40.0)
    assert md.rsi(close)[-1] == 100.0
    assert md.rsi_flag(close)[-1] == 1


def test_rsi_flag_thresholds():
    # a flat series has RSI 50
    flags = md.rsi_flag(np.full(30, 7.0))
    assert np.isnan(flags[:14]).all()
    assert (flags[14:] == 0).all()


def test_rsi_needs_more_than_period_points():
    with pytest.raises(md.InsufficientDataError):
        md.rsi(np.arange(14.0))


def test_macd_constant_series_scales_to_zero():
    close = np.full(100, 10.0)
    scaled, scaler = md.macd_diff_scaled(close, md.chrono_split(100))
    assert scaler.lo == scaler.hi == 0.0
    assert (scaled == 0).all()


def test_macd_training_max_scales_to_one():
    close = random_walk_prices(300, np.random.default_rng(3))[0].close
    split = md.chrono_split(300)
    raw = md.macd_diff(close)
    scaled, _ = md.macd_diff_scaled(close, split)
    lo, hi = split.train
    top = lo + int(np.argmax(raw[lo:hi]))
    assert scaled[top] == 1.0
    assert scaled[lo:hi].min() == 0.0
    assert ((scaled >= 0) & (scaled <= 1)).all()


def test_macd_reuses_given_scaler():
    close = random_walk_prices(300, np.random.default_rng(4))[0].close
    fixed = md.MinMax(-1.0, 1.0)
    scaled, scaler = md.macd_diff_scaled(close, md.chrono_split(300), scaler=fixed)
    assert scaler is fixed
    np.testing.assert_allclose(scaled, (md.macd_diff(close) + 1) / 2, rtol=0, atol=1e-15)


def test_bollinger_constant_series():
    up, down = md.bollinger_flags(np.full(40, 3.0))
    assert (up[19:] == 0).all() and (down[19:] == 0).all()
    assert np.isnan(up[:19]).all()


def test_bollinger_spike():
    # 20 flat days then one spike: window mean 100 + 50/20, population sd ~10.9
    close = np.full(21, 100.0)
    close[20] = 150.0
    mu = (19 * 100 + 150) / 20
    sd = np.sqrt((19 * (100 - mu) ** 2 + (150 - mu) ** 2) / 20)
    assert 150 > mu + 2 * sd
    up, down = md.bollinger_flags(close)
    assert up[20] == 1 and down[20] == 0


def test_ma_ratios_constant():
    f = md.ma_ratio_features(np.full(250, 9.0))
    assert (f[199:] == 0).all()


def test_sma13_on_ramp():
    close = np.arange(1.0, 21.0)
    assert md.sma(close, 13)[-1] == 14.0
    assert md.sma(close, 13)[-1] / close[-1] - 1 == pytest.approx(-0.30, abs=1e-15)


def test_indicators_match_loop_oracles():
    rng = np.random.default_rng(11)
    for _ in range(5):
        close = random_walk_prices(300, rng)[0].close
        np.testing.assert_allclose(md.rsi(close), oracles.rsi_loop(close), rtol=0, atol=1e-9, equal_nan=True)
        np.testing.assert_allclose(md.macd_diff(close), oracles.macd_loop(close), rtol=0, atol=1e-9)
        np.testing.assert_allclose(md.ema(close, 5), oracles.ema_loop(close, 5), rtol=0, atol=1e-9)
        np.testing.assert_allclose(md.sma(close, 50), oracles.sma_loop(close, 50), rtol=0, atol=1e-9,
                                   equal_nan=True)
        up, down = md.bollinger_flags(close)
        ou, od = oracles.bollinger_loop(close)
        np.testing.assert_array_equal(up, ou)
        np.testing.assert_array_equal(down, od)


# ---------------------------------------------------------------------------
# windows and splits


def test_make_windows_counts():
    assert len(md.make_windows(np.zeros((2, 3)), np.zeros(2), 1, 1)) == 1
    assert len(md.make_windows(np.zeros((100, 3)), np.zeros(100), 35, 5)) == 61


def test_make_windows_contents():
    feats = np.arange(20.0)[:, None]
    wins = md.make_windows(feats, np.arange(20.0) * 10, 4, 2)
    first = wins[0]
    assert first.anchor == 3
    assert first.features[:, 0].tolist() == [0, 1, 2, 3]
    assert first.target.tolist() == [40, 50]
    assert wins[-1].target.tolist() == [180, 190]


def test_make_windows_too_short():
    with pytest.raises(md.InsufficientDataError):
        md.make_windows(np.zeros((5, 1)), np.zeros(5), 4, 2)


@pytest.mark.parametrize("n, sizes", [(10, (8, 1, 1)), (100, (80, 10, 10)), (1234, (987, 123, 124))])
def test_chrono_split_sizes(n, sizes):
    s = md.chrono_split(n)
    got = tuple(b - a for a, b in s.ranges().values())
    assert got == sizes
    assert s.train[1] == s.valid[0] and s.valid[1] == s.test[0] and s.test[1] == n


def test_window_straddling_split_is_dropped():
    split = md.chrono_split(100)
    anchors = md.window_anchors(100, 5, 3, split, "train")
    # the last train window must end its target before row 80
    assert anchors.max() + 3 < 80
    assert 77 not in anchors
    assert 76 in anchors
    valid = md.window_anchors(100, 5, 3, split, "valid")
    assert valid.min() - 4 >= 80


@settings(max_examples=40, deadline=None)
@given(st.integers(20, 400), st.integers(1, 12), st.integers(1, 6))
def test_split_windows_never_cross(n, w, q):
    split = md.chrono_split(n)
    seen = set()
    for part, (lo, hi) in split.ranges().items():
        if hi - lo < w + q:
            continue
        for t in md.window_anchors(n, w, q, split, part):
            assert lo <= t - w + 1 and t + q < hi
            assert t not in seen
            seen.add(int(t))


# ---------------------------------------------------------------------------
# assembly


def test_feature_matrix_shape_and_ranges():
    series, vol = random_walk_prices(400, np.random.default_rng(5))
    fm = md.build_feature_matrix(series, vol)
    assert fm.values.shape == (200, 14)
    assert fm.dates[0] == series.dates[md.WARMUP]
    assert set(np.unique(fm.values[:, 5])) <= {-1.0, 0.0, 1.0}
    for col in (7, 8):
        assert set(np.unique(fm.values[:, col])) <= {0.0, 1.0}
    lo, hi = fm.split.train
    macd = fm.values[lo:hi, 6]
    assert macd.min() == 0.0 and macd.max() == 1.0


def test_feature_matrix_has_no_lookahead():
    series, vol = random_walk_prices(400, np.random.default_rng(6))
    full = md.build_feature_matrix(series, vol)
    cut = 330
    short = md.PriceSeries(series.dates[:cut], series.open[:cut], series.high[:cut],
                           series.low[:cut], series.close[:cut])
    part = md.build_feature_matrix(short, vol[:cut], macd_scaler=full.macd_scaler)
    np.testing.assert_array_equal(part.values, full.values[:cut - md.WARMUP])


def test_feature_csv_round_trip(tmp_path):
    series, vol = random_walk_prices(260, np.random.default_rng(7))
    fm = md.build_feature_matrix(series, vol)
    path = tmp_path / "f.csv"
    md.write_feature_csv(fm, path)
    df = md.read_feature_csv(path)
    np.testing.assert_array_equal(df[list(md.FEATURE_NAMES)].to_numpy(), fm.values)
    assert df["date"].iloc[0] == fm.dates[0].isoformat()


def test_align_volatility_reports_gap():
    series, vol = random_walk_prices(5, np.random.default_rng(0))
    with pytest.raises(ValueError, match=series.dates[2].isoformat()):
        md.align_volatility(series, series.dates[:2] + series.dates[3:], np.delete(vol, 2))

"""Market data ingestion, technical indicators, windowing and chronological splits."""

from __future__ import annotations

import csv
import datetime as dt
import io
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np
import pandas as pd

WARMUP = 200

FEATURE_NAMES = (
    "open_ret", "high_ret", "low_ret", "close_ret",
    "vol_ratio",
    "rsi_flag", "macd_scaled", "bolu_flag", "bold_flag",
    "ema5_ratio", "sma13_ratio", "sma21_ratio", "sma50_ratio", "sma200_ratio",
)
N_FEATURES = len(FEATURE_NAMES)


class SchemaError(ValueError):
    """A required CSV column is missing."""


class RowError(ValueError):
    """A CSV row could not be parsed."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class PriceSeries:
    dates: tuple[dt.date, ...]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray

    def __len__(self) -> int:
        return len(self.dates)


@dataclass(frozen=True)
class IndicatorConfig:
    rsi_period: int = 14
    rsi_low: float = 20.0
    rsi_high: float = 80.0
    macd_fast: int = 12
    macd_slow: int = 26
    macd_signal: int = 9
    bb_window: int = 20
    bb_width: float = 2.0


@dataclass(frozen=True)
class SplitSpec:
    """Half-open row ranges ``[start, stop)``."""

    train: tuple[int, int]
    valid: tuple[int, int]
    test: tuple[int, int]

    def ranges(self) -> dict[str, tuple[int, int]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}

    def which(self, lo: int, hi: int) -> str | None:
        """Name of the split containing rows ``lo..hi`` inclusive, if any."""
        for name, (a, b) in self.ranges().items():
            if a <= lo and hi < b:
                return name
        return None


@dataclass(frozen=True)
class TrainingWindow:
    anchor: int
    features: np.ndarray
    target: np.ndarray


# ---------------------------------------------------------------------------
# parsing


def _open_text(stream) -> IO[str]:
    if isinstance(stream, (bytes, bytearray)):
        return io.StringIO(stream.decode("utf-8-sig"))
    if isinstance(stream, io.TextIOBase) or isinstance(stream, io.StringIO):
        return stream
    return io.TextIOWrapper(stream, encoding="utf-8-sig")


def _read_rows(stream, required: Sequence[str]) -> list[tuple[int, dict[str, str]]]:
    reader = csv.reader(_open_text(stream))
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("empty file: no header row") from None
    header = [h.strip().lstrip("﻿") for h in header]
    for col in required:
        if col not in header:
            raise SchemaError(f"missing column {col!r}")
    idx = {c: header.index(c) for c in required}
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not cell.strip() for cell in rec):
            continue
        try:
            rows.append((lineno, {c: rec[i].strip() for c, i in idx.items()}))
        except IndexError:
            raise RowError(lineno, f"expected at least {max(idx.values()) + 1} fields") from None
    if not rows:
        raise ValueError("empty file: no data rows")
    return rows


def _parse_date(text: str, line: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise RowError(line, f"bad date {text!r}") from None


def _parse_float(text: str, col: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise RowError(line, f"bad number {text!r} in column {col}") from None


def parse_ohlc_csv(stream) -> PriceSeries:
    """Read ``Date,Open,High,Low,Close[,...]`` rows, sorted ascending by date."""
    cols = ("Date", "Open", "High", "Low", "Close")
    parsed = []
    for line, rec in _read_rows(stream, cols):
        d = _parse_date(rec["Date"], line)
        vals = [_parse_float(rec[c], c, line) for c in cols[1:]]
        parsed.append((d, *vals))
    parsed.sort(key=lambda r: r[0])
    for a, b in zip(parsed, parsed[1:]):
        if a[0] == b[0]:
            raise ValueError(f"duplicate date {a[0].isoformat()}")
    arr = np.array([r[1:] for r in parsed], dtype=np.float64)
    return PriceSeries(tuple(r[0] for r in parsed), arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


def parse_volatility_csv(stream) -> tuple[tuple[dt.date, ...], np.ndarray]:
    """Read a volatility-index CSV; only ``Date`` and ``Close`` are used."""
    parsed = []
    for line, rec in _read_rows(stream, ("Date", "Close")):
        parsed.append((_parse_date(rec["Date"], line), _parse_float(rec["Close"], "Close", line)))
    parsed.sort(key=lambda r: r[0])
    return tuple(r[0] for r in parsed), np.array([r[1] for r in parsed], dtype=np.float64)


# ---------------------------------------------------------------------------
# simple ratio features


def _ratio(x: np.ndarray) -> np.ndarray:
    prev = x[:-1]
    if np.any(prev == 0):
        raise ZeroDivisionError("zero previous value in price series")
    return x[1:] / prev


def price_and_vol_features(series: PriceSeries, volatility: np.ndarray) -> np.ndarray:
    """(n-1, 5) array: open/high/low/close returns and the volatility ratio.

    Row ``i`` corresponds to ``series.dates[i + 1]``.
    """
    if len(series) < 2:
        raise InsufficientDataError("need at least 2 rows")
    volatility = np.asarray(volatility, dtype=np.float64)
    if volatility.shape != (len(series),):
        raise ValueError("volatility must align with the price series")
    cols = [_ratio(a) - 1.0 for a in (series.open, series.high, series.low, series.close)]
    cols.append(_ratio(volatility))
    return np.column_stack(cols)


def target_returns(close) -> tuple[np.ndarray, np.ndarray]:
    """Close-to-close returns and their movements (zero counts as down)."""
    close = np.asarray(close, dtype=np.float64)
    if close.size < 2:
        raise InsufficientDataError("need at least 2 closes")
    c = _ratio(close) - 1.0
    return c, movement(c)


def movement(returns) -> np.ndarray:
    return np.where(np.asarray(returns) > 0, 1, -1)


# ---------------------------------------------------------------------------
# indicators; undefined warmup entries are NaN


def ema(x, span: int) -> np.ndarray:
    """Recursive EMA with alpha = 2/(span+1), seeded with the first value."""
    return pd.Series(np.asarray(x, dtype=np.float64)).ewm(span=span, adjust=False).mean().to_numpy()


def _windows(x: np.ndarray, window: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, window)


def sma(x, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.full(x.size, np.nan)
    if x.size >= window:
        out[window - 1:] = _windows(x, window).mean(axis=1)
    return out


def rsi(close, period: int = 14) -> np.ndarray:
    """Wilder RSI; entries before index ``period`` are NaN."""
    close = np.asarray(close, dtype=np.float64)
    if close.size <= period:
        raise InsufficientDataError(f"RSI needs more than {period} points")
    delta = np.diff(close)
    gain = np.clip(delta, 0, None)
    loss = np.clip(-delta, 0, None)
    out = np.full(close.size, np.nan)
    avg_g = gain[:period].mean()
    avg_l = loss[:period].mean()
    for i in range(period, close.size):
        if i > period:
            avg_g = (avg_g * (period - 1) + gain[i - 1]) / period
            avg_l = (avg_l * (period - 1) + loss[i - 1]) / period
        if avg_l == 0:
            out[i] = 100.0 if avg_g > 0 else 50.0
        else:
            out[i] = 100.0 - 100.0 / (1.0 + avg_g / avg_l)
    return out


def rsi_flag(close, period: int = 14, low: float = 20.0, high: float = 80.0) -> np.ndarray:
    r = rsi(close, period)
    flags = np.where(r <= low, -1.0, np.where(r >= high, 1.0, 0.0))
    flags[np.isnan(r)] = np.nan
    return flags


def macd_diff(close, fast: int = 12, slow: int = 26, signal: int = 9) -> np.ndarray:
    line = ema(close, fast) - ema(close, slow)
    return line - ema(line, signal)


@dataclass(frozen=True)
class MinMax:
    lo: float
    hi: float

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.hi == self.lo:
            return np.zeros_like(x)
        return np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0)


def fit_minmax(x: np.ndarray, rows: tuple[int, int]) -> MinMax:
    seg = np.asarray(x)[rows[0]:rows[1]]
    seg = seg[~np.isnan(seg)]
    if seg.size == 0:
        raise InsufficientDataError("no defined values in the fitting range")
    return MinMax(float(seg.min()), float(seg.max()))


def macd_diff_scaled(close, split: SplitSpec, cfg: IndicatorConfig = IndicatorConfig(),
                     scaler: MinMax | None = None) -> tuple[np.ndarray, MinMax]:
    """MACD DIFF min-max scaled with statistics from ``split.train`` rows only.

    Pass a previously fitted ``scaler`` to reuse it (deployment).
    """
    close = np.asarray(close, dtype=np.float64)
    if close.size < cfg.macd_slow + cfg.macd_signal:
        raise InsufficientDataError("series too short for MACD warmup")
    diff = macd_diff(close, cfg.macd_fast, cfg.macd_slow, cfg.macd_signal)
    if scaler is None:
        scaler = fit_minmax(diff, split.train)
    return scaler.apply(diff), scaler


def bollinger_flags(close, window: int = 20, width: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Flags for close above the upper / below the lower band (population std)."""
    c = np.asarray(close, dtype=np.float64)
    if c.size <= window:
        raise InsufficientDataError(f"Bollinger bands need more than {window} points")
    upper = np.full(c.size, np.nan)
    lower = np.full(c.size, np.nan)
    win = _windows(c, window)
    mid = win.mean(axis=1)
    sd = win.std(axis=1)
    upper[window - 1:] = mid + width * sd
    lower[window - 1:] = mid - width * sd
    bolu = (c > upper).astype(np.float64)
    bold = (c < lower).astype(np.float64)
    undefined = np.isnan(upper)
    bolu[undefined] = np.nan
    bold[undefined] = np.nan
    return bolu, bold


def ma_ratio_features(close) -> np.ndarray:
    """(n, 5): EMA5, SMA13, SMA21, SMA50, SMA200 each divided by close, minus 1."""
    close = np.asarray(close, dtype=np.float64)
    if close.size <= 200:
        raise InsufficientDataError("moving-average features need more than 200 points")
    mas = [ema(close, 5), sma(close, 13), sma(close, 21), sma(close, 50), sma(close, 200)]
    return np.column_stack([m / close - 1.0 for m in mas])


# ---------------------------------------------------------------------------
# assembly, windows, splits


def chrono_split(n_rows: int, ratios: Sequence[float] = (8, 1, 1)) -> SplitSpec:
    if n_rows < 10:
        raise InsufficientDataError(f"need at least 10 rows to split, got {n_rows}")
    total = float(sum(ratios))
    n_train = int(n_rows * ratios[0] / total)
    n_valid = int(n_rows * ratios[1] / total)
    return SplitSpec((0, n_train), (n_train, n_train + n_valid), (n_train + n_valid, n_rows))


def make_windows(features: np.ndarray, targets: np.ndarray, w: int, q: int) -> list[TrainingWindow]:
    """Stride-1 windows: rows ``[T-w+1, T]`` as history, targets ``T+1..T+q``."""
    features = np.asarray(features)
    targets = np.asarray(targets)
    n = len(features)
    if len(targets) != n:
        raise ValueError("features and targets must be aligned")
    if w < 1 or q < 1:
        raise ValueError("w and q must be positive")
    if n < w + q:
        raise InsufficientDataError(f"{n} rows cannot hold a window of w={w}, q={q}")
    return [
        TrainingWindow(anchor=t, features=features[t - w + 1:t + 1], target=targets[t + 1:t + q + 1])
        for t in range(w - 1, n - q)
    ]


def window_anchors(n: int, w: int, q: int, split: SplitSpec | None = None,
                   part: str | None = None) -> np.ndarray:
    """Anchors of all windows, optionally only those lying wholly inside one split."""
    if n < w + q:
        raise InsufficientDataError(f"{n} rows cannot hold a window of w={w}, q={q}")
    anchors = np.arange(w - 1, n - q)
    if split is None:
        return anchors
    lo, hi = split.ranges()[part]
    keep = (anchors - w + 1 >= lo) & (anchors + q < hi)
    return anchors[keep]


@dataclass
class FeatureMatrix:
    dates: tuple[dt.date, ...]
    values: np.ndarray           # (n, 14)
    target: np.ndarray           # (n,) close return of each row's own date
    split: SplitSpec
    macd_scaler: MinMax
    source_offset: int           # index of row 0 in the raw price series

    def __len__(self) -> int:
        return len(self.dates)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=list(FEATURE_NAMES))
        df.insert(0, "date", [d.isoformat() for d in self.dates])
        df["target_return"] = self.target
        return df


def align_volatility(series: PriceSeries, vol_dates, vol_values) -> np.ndarray:
    lookup = dict(zip(vol_dates, vol_values))
    missing = [d for d in series.dates if d not in lookup]
    if missing:
        raise ValueError(f"volatility series has no value for {missing[0].isoformat()}"
                         f" ({len(missing)} dates missing)")
    return np.array([lookup[d] for d in series.dates], dtype=np.float64)


def build_feature_matrix(series: PriceSeries, volatility: np.ndarray,
                         cfg: IndicatorConfig = IndicatorConfig(),
                         macd_scaler: MinMax | None = None,
                         ratios: Sequence[float] = (8, 1, 1)) -> FeatureMatrix:
    """Assemble all 14 features; the first ``WARMUP`` trading days are dropped."""
    n = len(series)
    if n <= WARMUP + 10:
        raise InsufficientDataError(f"need more than {WARMUP + 10} trading days, got {n}")
    close = series.close
    raw = np.full((n, N_FEATURES), np.nan)
    raw[1:, 0:5] = price_and_vol_features(series, volatility)
    raw[:, 5] = rsi_flag(close, cfg.rsi_period, cfg.rsi_low, cfg.rsi_high)
    raw[:, 7], raw[:, 8] = bollinger_flags(close, cfg.bb_window, cfg.bb_width)
    raw[:, 9:14] = ma_ratio_features(close)
    split = chrono_split(n - WARMUP, ratios)
    raw_split = SplitSpec(*[(a + WARMUP, b + WARMUP) for a, b in split.ranges().values()])
    raw[:, 6], scaler = macd_diff_scaled(close, raw_split, cfg, macd_scaler)
    target = np.full(n, np.nan)
    target[1:] = _ratio(close) - 1.0
    values = raw[WARMUP:]
    assert not np.isnan(values).any(), "undefined feature after warmup"
    return FeatureMatrix(series.dates[WARMUP:], values, target[WARMUP:], split, scaler, WARMUP)


def write_feature_csv(fm: FeatureMatrix, path) -> None:
    fm.to_frame().to_csv(path, index=False, float_format="%.17g")


def read_feature_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in ("date", *FEATURE_NAMES, "target_return") if c not in df.columns]
    if missing:
        raise SchemaError(f"missing column {missing[0]!r}")
    return df

"""Glue between raw inputs, the training loop and deployment."""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
from dataclasses import dataclass

import numpy as np

from . import marketdata as md
from . import newstext as nt
from .deploy import REPORT_KEYS, EvalReport, PredictionRecord, metrics, predict_range
from .training import IndexGAN, TrainConfig, TrainResult, WindowDataset, train

VOL_COLUMN = md.FEATURE_NAMES.index("vol_ratio")


@dataclass
class PreparedData:
    dates: tuple[dt.date, ...]
    market: np.ndarray
    returns: np.ndarray
    split: md.SplitSpec
    news: np.ndarray | None = None
    meta: dict = dataclasses.field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.dates)

    def windows(self, cfg: TrainConfig, part: str | None = "train") -> WindowDataset:
        split = None if part is None else self.split
        anchors = md.window_anchors(len(self), cfg.w, cfg.q, split, part)
        return WindowDataset(self.market, self.returns, anchors, cfg.w, cfg.q, self.news)

    def targets_in(self, part: str) -> list[int]:
        lo, hi = self.split.ranges()[part]
        return list(range(lo, hi))


def prepare(series: md.PriceSeries, volatility: np.ndarray, cfg: TrainConfig,
            bundles: dict | None = None, table: nt.EmbeddingTable | None = None,
            meta: dict | None = None) -> PreparedData:
    """Feature matrix, optional pooled news and split for one index.

    ``meta`` carries statistics fitted at training time (MACD scaler, headline
    length) so deployment reuses them instead of refitting.
    """
    meta = dict(meta or {})
    scaler = None
    if "macd_min" in meta:
        scaler = md.MinMax(meta["macd_min"], meta["macd_max"])
    fm = md.build_feature_matrix(series, volatility, macd_scaler=scaler)
    market = fm.values if cfg.use_volatility else np.delete(fm.values, VOL_COLUMN, axis=1)
    meta.update(macd_min=fm.macd_scaler.lo, macd_max=fm.macd_scaler.hi)
    news = None
    if cfg.use_news:
        if bundles is None or table is None:
            raise ValueError("use_news is set but no news file / embedding table was supplied")
        if table.dim != cfg.m:
            raise ValueError(f"embedding dimension {table.dim} != config m={cfg.m}")
        aligned = nt.align_news(fm.dates, bundles)
        if "headline_len" not in meta:
            lo, hi = fm.split.train
            meta["headline_len"] = nt.corpus_max_length(aligned[lo:hi])
        l = int(meta["headline_len"])
        news = np.stack([nt.pooled_day(b, table, l, cfg.k) for b in aligned])
    return PreparedData(fm.dates, market, fm.target, fm.split, news, meta)


# ---------------------------------------------------------------------------
# synthetic data


def random_walk_prices(n: int, rng: np.random.Generator, start: dt.date = dt.date(2010, 1, 4),
                       drift: float = 2e-4, scale: float = 0.01) -> tuple[md.PriceSeries, np.ndarray]:
    """Business-day OHLC random walk and a positive volatility series."""
    rets = drift + scale * rng.standard_normal(n)
    close = 100.0 * np.exp(np.cumsum(rets))
    open_ = close * np.exp(0.002 * rng.standard_normal(n))
    spread = np.abs(0.004 * rng.standard_normal(n))
    high = np.maximum(open_, close) * (1 + spread)
    low = np.minimum(open_, close) * (1 - spread)
    vol = 20.0 * np.exp(np.cumsum(0.03 * rng.standard_normal(n)))
    dates, d = [], start
    while len(dates) < n:
        if d.weekday() < 5:
            dates.append(d)
        d += dt.timedelta(days=1)
    return md.PriceSeries(tuple(dates), open_, high, low, close), vol


def planted_signal(n: int = 2000, fidelity: float = 0.8, n_features: int = 14,
                   period: float = 20.0, scale: float = 0.01,
                   rng: np.random.Generator | None = None) -> PreparedData:
    """Synthetic rows where column 0 carries the next day's direction.

    Column 0 is a quasi-periodic signal (sine of a phase advancing by
    ``2*pi/period`` with 20% jitter), so its sign is balanced over any stretch
    of a few periods yet persists for several days. The return on row ``t + 1``
    has the sign of column 0 on row ``t`` with probability ``fidelity`` and the
    opposite sign otherwise. Other columns are noise.
    """
    rng = rng or np.random.default_rng(0)
    steps = 2 * np.pi / period * (1 + 0.2 * rng.standard_normal(n))
    signal = np.sin(rng.uniform(0, 2 * np.pi) + np.cumsum(steps))
    market = rng.standard_normal((n, n_features)) * 0.5
    market[:, 0] = signal
    agree = rng.random(n) < fidelity
    direction = np.ones(n)
    direction[1:] = np.where(signal[:-1] > 0, 1.0, -1.0)
    direction[~agree] *= -1
    magnitude = scale * (0.25 + rng.exponential(1.0, n))
    returns = direction * magnitude
    dates, d = [], dt.date(2000, 1, 3)
    while len(dates) < n:
        if d.weekday() < 5:
            dates.append(d)
        d += dt.timedelta(days=1)
    return PreparedData(tuple(dates), market, returns, md.chrono_split(n))


# ---------------------------------------------------------------------------
# end to end


@dataclass
class RunOutcome:
    result: TrainResult
    report: EvalReport
    records: list[PredictionRecord]
    up_fraction: float


def fit_and_evaluate(data: PreparedData, cfg: TrainConfig, parts=("valid", "test"),
                     mc_samples: int = 0) -> RunOutcome:
    """Train on the train split and score rolling predictions on ``parts``."""
    result = train(data.windows(cfg, "train"), cfg, model=IndexGAN.create(cfg, data.meta))
    targets = [t for p in parts for t in data.targets_in(p)]
    records = [r for r in predict_range(result.model, data.market, data.news, targets,
                                        data.dates, mc_samples) if isinstance(r, PredictionRecord)]
    preds = np.array([r.movement for r in records])
    truths = np.where(data.returns[[r.target_index for r in records]] > 0, 1, -1)
    return RunOutcome(result, metrics(preds, truths), records, float(np.mean(preds == 1)))


def horizon_sweep(data: PreparedData, cfg: TrainConfig, horizons=range(2, 11)) -> list[tuple[int, EvalReport]]:
    rows = []
    for q in horizons:
        out = fit_and_evaluate(data, dataclasses.replace(cfg, q=q))
        rows.append((q, out.report))
    return rows


def write_sweep_csv(rows: list[tuple[int, EvalReport]], path) -> None:
    """One metrics row per horizon: ``q,n,tp,tn,fp,fn,accuracy,f1,mcc``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["q", *REPORT_KEYS])
        for q, rep in rows:
            wr.writerow([q, *[getattr(rep, k) for k in REPORT_KEYS]])

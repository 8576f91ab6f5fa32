"""Rolling deployment, classification metrics and report files."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .training import IndexGAN


class InsufficientHistoryError(ValueError):
    pass


def movement_of(x: float) -> int:
    """Sign with ties counted as down."""
    return 1 if x > 0 else -1


@dataclass
class PredictionRecord:
    target_index: int
    round_returns: np.ndarray
    mean_return: float
    movement: int
    target_date: dt.date | None = None


def rolling_predict(target: int, generate: Callable[[int], np.ndarray], w: int, q: int,
                    dates: Sequence[dt.date] | None = None) -> PredictionRecord:
    """Average of the q rounds that each land one generated value on row ``target``.

    Round ``j`` (1-based) uses the window ending at ``target - j`` and takes
    element ``j`` of its generated sequence, so only rows before ``target`` are read.
    """
    earliest = w - 1 + q
    if target < earliest:
        where = f" ({dates[earliest].isoformat()})" if dates is not None and earliest < len(dates) else ""
        raise InsufficientHistoryError(
            f"row {target} lacks history for w={w}, q={q}; earliest predictable row is {earliest}{where}"
        )
    rounds = np.array([generate(target - j)[j - 1] for j in range(1, q + 1)], dtype=np.float64)
    mean = float(rounds.mean())
    date = dates[target] if dates is not None and target < len(dates) else None
    return PredictionRecord(target, rounds, mean, movement_of(mean), date)


class WindowGenerator:
    """Cached ``end_index -> q returns`` map backed by a trained model in eval mode.

    ``mc_samples == 0`` uses the zero noise vector; otherwise the output is the
    mean over that many Gaussian draws from a generator seeded with ``seed``.
    """

    def __init__(self, model: IndexGAN, market: np.ndarray, news: np.ndarray | None,
                 mc_samples: int = 0, seed: int = 0, batch: int = 256):
        self.model = model
        self.market = np.asarray(market, dtype=np.float64)
        self.news = news
        self.mc_samples = mc_samples
        self.seed = seed
        self.batch = batch
        self.cache: dict[int, np.ndarray] = {}

    def _history(self, ends: np.ndarray):
        w = self.model.config.w
        idx = ends[:, None] + np.arange(-w + 1, 1)[None, :]
        return self.market[idx], None if self.news is None else self.news[idx]

    def precompute(self, ends) -> None:
        todo = np.array(sorted({int(e) for e in ends} - set(self.cache)), dtype=np.int64)
        for start in range(0, len(todo), self.batch):
            chunk = todo[start:start + self.batch]
            market, news = self._history(chunk)
            if self.mc_samples <= 0:
                out = self.model.predict(market, news)
            else:
                rng = np.random.default_rng(self.seed)
                out = np.zeros((len(chunk), self.model.config.q))
                for _ in range(self.mc_samples):
                    out += self.model.predict(market, news, self.model.noise(len(chunk), rng))
                out /= self.mc_samples
            for e, row in zip(chunk, out):
                self.cache[int(e)] = row

    def __call__(self, end: int) -> np.ndarray:
        if end not in self.cache:
            self.precompute([end])
        return self.cache[end]


def predict_range(model: IndexGAN, market, news, targets: Sequence[int],
                  dates: Sequence[dt.date] | None = None, mc_samples: int = 0,
                  seed: int = 0) -> list[PredictionRecord | InsufficientHistoryError]:
    cfg = model.config
    gen = WindowGenerator(model, market, news, mc_samples, seed)
    ends = [t - j for t in targets for j in range(1, cfg.q + 1) if t - j >= cfg.w - 1]
    with ad.no_grad():
        gen.precompute(ends)
    out: list = []
    for t in targets:
        try:
            out.append(rolling_predict(t, gen, cfg.w, cfg.q, dates))
        except InsufficientHistoryError as exc:
            out.append(exc)
    return out


def write_predictions(path, records, dates: Sequence[dt.date], targets: Sequence[int], q: int) -> None:
    """``date,mean_return,movement,round_1..round_q,status`` with one row per target."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["date", "mean_return", "movement", *[f"round_{j}" for j in range(1, q + 1)], "status"])
        for t, rec in zip(targets, records):
            if isinstance(rec, PredictionRecord):
                wr.writerow([dates[t].isoformat(), repr(rec.mean_return), rec.movement,
                             *[repr(float(v)) for v in rec.round_returns], "ok"])
            else:
                wr.writerow([dates[t].isoformat(), "", "", *[""] * q, "insufficient_history"])


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    f1: float
    mcc: float
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(predictions, truths) -> tuple[int, int, int, int]:
    p = np.asarray(predictions)
    t = np.asarray(truths)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} predictions vs {t.shape} truths")
    if p.size == 0:
        raise ValueError("no samples to evaluate")
    bad = ~np.isin(p, (-1, 1)) | ~np.isin(t, (-1, 1))
    if bad.any():
        raise ValueError("labels must be -1 or +1")
    tp = int(np.sum((p == 1) & (t == 1)))
    tn = int(np.sum((p == -1) & (t == -1)))
    fp = int(np.sum((p == 1) & (t == -1)))
    fn = int(np.sum((p == -1) & (t == 1)))
    return tp, tn, fp, fn


def report_from_counts(tp: int, tn: int, fp: int, fn: int) -> EvalReport:
    n = tp + tn + fp + fn
    acc = (tp + tn) / n
    f1_den = 2 * tp + fp + fn
    f1 = 2 * tp / f1_den if f1_den else 0.0
    factors = (tp + fp, tp + fn, tn + fp, tn + fn)
    if 0 in factors:
        mcc = 0.0
    else:
        mcc = (tp * tn - fp * fn) / math.sqrt(math.prod(factors))
    return EvalReport(tp, tn, fp, fn, acc, f1, mcc)


def metrics(predictions, truths) -> EvalReport:
    """Accuracy, F1 of the up class and MCC (0 when a marginal is empty)."""
    return report_from_counts(*confusion(predictions, truths))


def naive_baseline(truths) -> np.ndarray:
    """Persistence: predict yesterday's realised movement, +1 on the first day."""
    t = np.asarray(truths)
    if t.size == 0:
        raise ValueError("no truths")
    out = np.empty_like(t)
    out[0] = 1
    out[1:] = t[:-1]
    return out


REPORT_KEYS = ("n", "tp", "tn", "fp", "fn", "accuracy", "f1", "mcc")


def format_report(model: EvalReport, baseline: EvalReport | None = None) -> str:
    lines = []
    for label, rep in (("model", model), ("naive", baseline)):
        if rep is None:
            continue
        for key in REPORT_KEYS:
            val = getattr(rep, key)
            lines.append(f"{label}.{key} = {val if isinstance(val, int) else repr(float(val))}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out

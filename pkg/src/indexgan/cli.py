"""Command-line entry point: features | train | predict | evaluate | gradcheck."""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import marketdata as md
from . import newstext as nt
from .deploy import (
    format_report,
    metrics,
    naive_baseline,
    predict_range,
    write_predictions,
)
from .gradsuite import run_gradient_suite
from .pipeline import prepare, random_walk_prices
from .training import (
    ConfigError,
    IndexGAN,
    TrainConfig,
    load_checkpoint,
    read_config_file,
    save_checkpoint,
    train,
    write_loss_log,
)

log = logging.getLogger("indexgan")

GRADCHECK_TOLERANCE = 1e-4


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _open(path: str):
    try:
        return open(path, "rb")
    except OSError as exc:
        raise CliError(f"cannot open {path}: {exc.strerror}") from None


def _load_market(args) -> tuple[md.PriceSeries, np.ndarray]:
    with _open(args.ohlc) as fh:
        series = md.parse_ohlc_csv(fh)
    with _open(args.vol) as fh:
        vdates, vvals = md.parse_volatility_csv(fh)
    return series, md.align_volatility(series, vdates, vvals)


def _load_news(args, cfg: TrainConfig):
    if not cfg.use_news:
        return None, None
    if not args.news or not args.embeddings:
        raise CliError("use_news is enabled: pass --news and --embeddings, or --set use_news=false")
    with _open(args.news) as fh:
        bundles = nt.parse_news_csv(fh, cfg.k)
    vocab = {tok for b in bundles.values() for h in b.headlines for tok in h}
    with _open(args.embeddings) as fh:
        table = nt.parse_embedding_file(fh, cfg.m, vocab)
    return bundles, table


def _config(args) -> TrainConfig:
    values: dict[str, str] = {}
    if args.config:
        if not Path(args.config).exists():
            raise CliError(f"config file not found: {args.config}")
        values.update(read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v
    return TrainConfig().override(values).validate()


def _parse_date(text: str | None):
    if text is None:
        return None
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise CliError(f"bad date {text!r}, expected YYYY-MM-DD") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_features(args) -> int:
    series, vol = _load_market(args)
    fm = md.build_feature_matrix(series, vol)
    out = args.out or sys.stdout
    md.write_feature_csv(fm, out)
    if args.out:
        print(f"wrote {len(fm)} rows to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    series, vol = _load_market(args)
    bundles, table = _load_news(args, cfg)
    data = prepare(series, vol, cfg, bundles, table)
    model = IndexGAN.create(cfg, data.meta)
    result = train(data.windows(cfg, "train"), cfg, model=model)
    save_checkpoint(result.model, args.checkpoint)
    if args.loss_log:
        write_loss_log(result.log, args.loss_log)
    print(f"trained {result.critic_updates} critic / {result.generator_updates} generator updates;"
          f" checkpoint {args.checkpoint}")
    return 0


def cmd_predict(args) -> int:
    if not args.checkpoint:
        raise CliError("predict requires --checkpoint")
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    series, vol = _load_market(args)
    bundles, table = _load_news(args, cfg)
    data = prepare(series, vol, cfg, bundles, table, meta=model.meta)
    start, end = _parse_date(args.start), _parse_date(args.end)
    if start is None and end is None:
        targets = data.targets_in("test")
    else:
        targets = [i for i, d in enumerate(data.dates)
                   if (start is None or d >= start) and (end is None or d <= end)]
    if not targets:
        raise CliError("no trading dates in the requested range")
    records = predict_range(model, data.market, data.news, targets, data.dates, args.mc_samples, args.seed)
    write_predictions(args.out, records, data.dates, targets, cfg.q)
    print(f"wrote {len(targets)} predictions to {args.out}")
    return 0


def evaluate_files(predictions_path, truths_path) -> str:
    preds = pd.read_csv(predictions_path, float_precision="round_trip")
    truths = pd.read_csv(truths_path, float_precision="round_trip")
    for col in ("date", "movement"):
        if col not in preds.columns:
            raise CliError(f"{predictions_path}: missing column {col!r}")
    if "date" not in truths.columns or "target_return" not in truths.columns:
        raise CliError(f"{truths_path}: needs 'date' and 'target_return' columns")
    if "status" in preds.columns:
        preds = preds[preds["status"] == "ok"]
    joined = preds.merge(truths[["date", "target_return"]], on="date", how="inner")
    if joined.empty:
        raise CliError("no overlapping dates between predictions and truths")
    joined = joined.sort_values("date")
    y_hat = joined["movement"].astype(int).to_numpy()
    y = np.where(joined["target_return"].to_numpy() > 0, 1, -1)
    return format_report(metrics(y_hat, y), metrics(naive_baseline(y), y))


def cmd_evaluate(args) -> int:
    text = evaluate_files(args.predictions, args.truths)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    res = run_gradient_suite(args.seed)
    print(f"generator max relative error {res.generator_error:.3e}")
    print(f"critic max relative error {res.critic_error:.3e}")
    print(f"max relative error {res.max_error:.3e}")
    return 0 if res.max_error < GRADCHECK_TOLERANCE else 1


def cmd_synth(args) -> int:
    series, vol = random_walk_prices(args.days, np.random.default_rng(args.seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"Date": [d.isoformat() for d in series.dates], "Open": series.open,
                  "High": series.high, "Low": series.low, "Close": series.close}
                 ).to_csv(out / "ohlc.csv", index=False, float_format="%.6f")
    pd.DataFrame({"Date": [d.isoformat() for d in series.dates], "Close": vol}
                 ).to_csv(out / "vol.csv", index=False, float_format="%.4f")
    print(f"wrote {out / 'ohlc.csv'} and {out / 'vol.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="indexgan", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def market_args(sp, required=True):
        sp.add_argument("--ohlc", required=required, help="index OHLC CSV")
        sp.add_argument("--vol", required=required, help="volatility index CSV (Date, Close)")

    def news_args(sp):
        sp.add_argument("--news", help="news CSV (Date, Top1..Top25)")
        sp.add_argument("--embeddings", help="word-embedding text file")

    sp = sub.add_parser("features", help="write the feature matrix CSV")
    market_args(sp)
    sp.add_argument("--out", help="output CSV (default stdout)")
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("train", help="train and write a checkpoint")
    market_args(sp)
    news_args(sp)
    sp.add_argument("--config", help="key = value config file")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--loss-log")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="rolling predictions over a date range")
    market_args(sp)
    news_args(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--start")
    sp.add_argument("--end")
    sp.add_argument("--mc-samples", type=int, default=0, help="average over this many noise draws (0: z = 0)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="score predictions against realised returns")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--truths", required=True, help="CSV with date and target_return (e.g. features output)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the toy networks")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth", help="write a synthetic OHLC/volatility pair for trying the pipeline")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--days", type=int, default=900)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        return args.func(args)
    except (CliError, ConfigError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"indexgan: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

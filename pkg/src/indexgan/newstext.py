"""Headline cleaning, embedding-table loading and per-day embedding tensors."""

from __future__ import annotations

import csv
import datetime as dt
import io
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

MAX_HEADLINES = 25


class EmbeddingFormatError(ValueError):
    pass


def load_stopwords() -> frozenset[str]:
    text = resources.files("indexgan.data").joinpath("stopwords_en.txt").read_text("utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


STOPWORDS = load_stopwords()


def clean_headline(raw: str, stopwords: frozenset[str] = STOPWORDS) -> list[str]:
    """Lowercase, drop every non-letter character, split, remove stop words."""
    kept = "".join(ch for ch in raw.lower() if ch.isalpha() or ch.isspace())
    return [tok for tok in kept.split() if tok not in stopwords]


_BYTES_WRAPPER = re.compile(r"""^b(['"])(.*)\1$""", re.DOTALL)


def unwrap_cell(cell: str) -> str:
    """Strip surrounding quotes and a ``b'...'`` byte-literal wrapper."""
    s = cell.strip()
    m = _BYTES_WRAPPER.match(s)
    if m:
        s = m.group(2)
    elif len(s) >= 2 and s[0] == s[-1] and s[0] in "'\"":
        s = s[1:-1]
    return s.strip()


@dataclass(frozen=True)
class HeadlineBundle:
    date: dt.date
    headlines: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        if len(self.headlines) > MAX_HEADLINES:
            raise ValueError(f"{self.date}: {len(self.headlines)} headlines exceeds {MAX_HEADLINES}")


def parse_news_csv(stream, k: int = MAX_HEADLINES) -> dict[dt.date, HeadlineBundle]:
    """Read ``Date,Top1,...,TopK``; blank cells are absent headlines."""
    if isinstance(stream, (bytes, bytearray)):
        stream = io.StringIO(stream.decode("utf-8-sig"))
    elif not isinstance(stream, io.TextIOBase):
        stream = io.TextIOWrapper(stream, encoding="utf-8-sig")
    reader = csv.reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ValueError("empty news file") from None
    if "Date" not in header:
        raise ValueError("news file is missing the 'Date' column")
    date_col = header.index("Date")
    top_cols = [i for i, h in enumerate(header) if re.fullmatch(r"Top\d+", h)]
    top_cols.sort(key=lambda i: int(header[i][3:]))
    top_cols = top_cols[:k]
    out: dict[dt.date, HeadlineBundle] = {}
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        try:
            date = dt.date.fromisoformat(rec[date_col].strip())
        except (ValueError, IndexError):
            raise ValueError(f"line {lineno}: bad date") from None
        heads = []
        for i in top_cols:
            if i < len(rec):
                text = unwrap_cell(rec[i])
                if text:
                    heads.append(tuple(clean_headline(text)))
        out[date] = HeadlineBundle(date, tuple(heads))
    return out


def align_news(dates: Sequence[dt.date], bundles: Mapping[dt.date, HeadlineBundle]) -> list[HeadlineBundle]:
    """One bundle per trading date; news dated on other days is dropped."""
    return [bundles.get(d, HeadlineBundle(d)) for d in dates]


@dataclass
class EmbeddingTable:
    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def lookup(self, token: str) -> np.ndarray:
        vec = self.vectors.get(token)
        return np.zeros(self.dim) if vec is None else vec


def parse_embedding_file(stream, m: int, vocab: Iterable[str] | None = None) -> EmbeddingTable:
    """GloVe-style text: ``token v1 ... vm`` per line; the first occurrence wins.

    ``vocab`` optionally restricts which tokens are kept (the whole file is still validated).
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = io.StringIO(stream.decode("utf-8"))
    elif not isinstance(stream, io.TextIOBase):
        stream = io.TextIOWrapper(stream, encoding="utf-8")
    keep = None if vocab is None else set(vocab)
    table = EmbeddingTable(m)
    seen_any = False
    for lineno, line in enumerate(stream, start=1):
        parts = line.rstrip("\n").rstrip("\r").split(" ")
        if not line.strip():
            continue
        seen_any = True
        token, values = parts[0], [p for p in parts[1:] if p]
        if len(values) != m:
            raise EmbeddingFormatError(f"line {lineno}: expected {m} values, found {len(values)}")
        if token in table.vectors or (keep is not None and token not in keep):
            continue
        try:
            table.vectors[token] = np.array([float(v) for v in values])
        except ValueError:
            raise EmbeddingFormatError(f"line {lineno}: non-numeric value") from None
    if not seen_any:
        raise EmbeddingFormatError("empty embedding file")
    return table


def corpus_max_length(bundles: Iterable[HeadlineBundle]) -> int:
    lengths = [len(h) for b in bundles for h in b.headlines]
    if not lengths or max(lengths) == 0:
        raise ValueError("corpus has no non-empty headline")
    return max(lengths)


def embed_day(bundle: HeadlineBundle, table: EmbeddingTable, l: int, k: int = MAX_HEADLINES) -> np.ndarray:
    """k x l x m tensor; OOV tokens, short headlines and missing slots stay zero."""
    if l < 1:
        raise ValueError("l must be at least 1")
    out = np.zeros((k, l, table.dim))
    for j, headline in enumerate(bundle.headlines[:k]):
        for i, tok in enumerate(headline[:l]):
            vec = table.vectors.get(tok)
            if vec is not None:
                out[j, i] = vec
    return out


def pooled_day(bundle: HeadlineBundle, table: EmbeddingTable, l: int, k: int = MAX_HEADLINES) -> np.ndarray:
    """Word-axis mean of :func:`embed_day`, flattened to ``k * m``."""
    return embed_day(bundle, table, l, k).mean(axis=1).reshape(-1)

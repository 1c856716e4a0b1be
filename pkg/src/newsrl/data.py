"""Bar/news ingestion, forward-filled score alignment, features, splits and episode sampling."""

from __future__ import annotations

import bisect
import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MINUTE_MS = 60_000
NEUTRAL_SCORE = 3
BAR_HEADER = ["ts", "open", "high", "low", "close", "volume"]
FRAME_HEADER = ["ts", "open", "high", "low", "close", "volume", "sentiment", "risk"]
FEATURE_MODES = ("returns", "raw_scaled")
N_FEATURES = 6
SENTIMENT_CHANNELS = (4, 5)
STD_GUARD = 1e-12


class DataError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Bar:
    ts: int
    open: float
    high: float
    low: float
    close: float
    volume: float

    def validate(self) -> None:
        if not (self.low <= min(self.open, self.close) and max(self.open, self.close) <= self.high):
            raise DataError(f"OHLC invariant violated at ts={self.ts}: o={self.open} h={self.high} l={self.low} c={self.close}")
        if self.volume < 0:
            raise DataError(f"negative volume at ts={self.ts}")


@dataclass(frozen=True, slots=True)
class NewsItem:
    ts: int
    title: str
    body: str = ""

    @property
    def id(self) -> str:
        return news_id(self.ts, self.title)


def news_id(ts: int, title: str) -> str:
    return hashlib.sha256(f"{ts}\x1f{title}".encode()).hexdigest()[:16]


@dataclass(frozen=True, slots=True)
class AlignedFrame:
    ts: int
    bar: Bar
    sentiment: int
    risk: int


@dataclass(frozen=True)
class DatasetSplit:
    train: range
    validation: range
    test: range

    def __getitem__(self, tag: str) -> range:
        return {"train": self.train, "validation": self.validation, "test": self.test}[tag]


@dataclass(frozen=True)
class EpisodeWindow:
    """``length`` consecutive frames starting at ``start`` (global frame index)."""

    start: int
    length: int = 3000
    split_tag: str = "train"

    @property
    def stop(self) -> int:
        return self.start + self.length


# ---------------------------------------------------------------- ingestion


def load_bars(path: str | Path) -> list[Bar]:
    """Read a ``ts,open,high,low,close,volume`` CSV. Gaps are logged, duplicates rejected."""
    bars = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != BAR_HEADER:
            raise DataError(f"{path}: expected header {','.join(BAR_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ts = int(row[0])
                o, h, l, c, v = (float(x) for x in row[1:6])
                if len(row) != 6:
                    raise ValueError(f"expected 6 fields, got {len(row)}")
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: unparsable row {row!r} ({exc})") from None
            bar = Bar(ts, o, h, l, c, v)
            try:
                bar.validate()
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            bars.append(bar)
    bars.sort(key=lambda b: b.ts)
    for prev, cur in zip(bars, bars[1:]):
        if cur.ts == prev.ts:
            raise DataError(f"{path}: duplicate timestamp {cur.ts}")
    gaps = count_missing_minutes(bars)
    if gaps:
        log.warning("%s: %d missing minutes", path, gaps)
    return bars


def count_missing_minutes(bars: Sequence[Bar]) -> int:
    return sum(max(0, (b.ts - a.ts) // MINUTE_MS - 1) for a, b in zip(bars, bars[1:]))


def write_bars(path: str | Path, bars: Iterable[Bar]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BAR_HEADER)
        for b in bars:
            w.writerow([int(b.ts)] + [repr(float(x)) for x in (b.open, b.high, b.low, b.close, b.volume)])


def load_news(path: str | Path) -> list[NewsItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                item = NewsItem(int(obj["ts"]), str(obj["title"]), str(obj.get("body", "")))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad news record ({exc})") from None
            if not item.title.strip():
                raise DataError(f"{path}:{lineno}: empty title")
            items.append(item)
    items.sort(key=lambda n: (n.ts, n.title))
    return items


def write_news(path: str | Path, items: Iterable[NewsItem]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for n in items:
            fh.write(json.dumps({"id": n.id, "ts": n.ts, "title": n.title, "body": n.body}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- alignment


def forward_fill_scores(bars: Sequence[Bar], scored_news: Sequence) -> list[AlignedFrame]:
    """Attach to every bar the scores of the latest news with ``news.ts <= bar.ts``.

    ``scored_news`` items need ``ts``, ``sentiment`` and ``risk`` attributes and
    must be sorted by ``ts``. Bars before the first news get (3, 3).
    """
    times = [n.ts for n in scored_news]
    if any(b < a for a, b in zip(times, times[1:])):
        raise DataError("scored news must be sorted by ts")
    frames = []
    for bar in bars:
        k = bisect.bisect_right(times, bar.ts) - 1
        if k < 0:
            s, r = NEUTRAL_SCORE, NEUTRAL_SCORE
        else:
            s, r = scored_news[k].sentiment, scored_news[k].risk
        frames.append(AlignedFrame(bar.ts, bar, int(s), int(r)))
    return frames


def write_frames(path: str | Path, frames: Iterable[AlignedFrame]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FRAME_HEADER)
        for f in frames:
            b = f.bar
            w.writerow([int(f.ts)] + [repr(float(x)) for x in (b.open, b.high, b.low, b.close, b.volume)]
                       + [int(f.sentiment), int(f.risk)])


def load_frames(path: str | Path) -> list[AlignedFrame]:
    frames = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FRAME_HEADER:
            raise DataError(f"{path}: expected header {','.join(FRAME_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                ts = int(row[0])
                bar = Bar(ts, *(float(x) for x in row[1:6]))
                frames.append(AlignedFrame(ts, bar, int(row[6]), int(row[7])))
            except (ValueError, IndexError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: unparsable frame ({exc})") from None
    return frames


# ---------------------------------------------------------------- splitting


def chronological_split(frames: Sequence, boundaries: tuple[float, float] = (0.70, 0.85)) -> DatasetSplit:
    n = len(frames)
    if n == 0:
        raise DataError("cannot split an empty series")
    a = math.floor(boundaries[0] * n)
    b = math.floor(boundaries[1] * n)
    split = DatasetSplit(range(0, a), range(a, b), range(b, n))
    for tag in ("train", "validation", "test"):
        if len(split[tag]) == 0:
            raise DataError(f"{tag} split is empty for N={n}")
    return split


def sample_windows(split_range: range, length: int = 3000, lookback: int = 1, count: int = 256,
                   seed: int = 0, split_tag: str = "train") -> list[EpisodeWindow]:
    """Uniformly sample episode windows with ``[start - lookback, start + length)`` inside the split."""
    lo = split_range.start + lookback
    hi = split_range.stop - length
    if hi < lo:
        raise DataError(f"{split_tag} split of {len(split_range)} frames is too short for length={length} + lookback={lookback}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(lo, hi + 1, size=count)
    return [EpisodeWindow(int(s), length, split_tag) for s in starts]


# ----------------------------------------------------------------- features


@dataclass
class MarketData:
    """Column view of aligned frames used by the environment and features."""

    ts: np.ndarray
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    sentiment: np.ndarray
    risk: np.ndarray

    @classmethod
    def from_frames(cls, frames: Sequence[AlignedFrame]) -> MarketData:
        return cls(
            ts=np.array([f.ts for f in frames], dtype=np.int64),
            open=np.array([f.bar.open for f in frames]),
            high=np.array([f.bar.high for f in frames]),
            low=np.array([f.bar.low for f in frames]),
            close=np.array([f.bar.close for f in frames]),
            volume=np.array([f.bar.volume for f in frames]),
            sentiment=np.array([f.sentiment for f in frames], dtype=np.int64),
            risk=np.array([f.risk for f in frames], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.close)


@dataclass
class Features:
    """Per-frame feature matrix plus the observation rule for its mode.

    In ``raw_scaled`` mode columns 0-2 hold high, low and close levels that are
    divided by the first close of each observation window when observed.
    """

    matrix: np.ndarray
    mode: str = "returns"

    def __len__(self) -> int:
        return len(self.matrix)

    def observe(self, t: int, lookback: int, floor: int = 0) -> np.ndarray:
        """Rows ``t-lookback+1 .. t``; rows before ``floor`` are edge-padded with row ``floor``."""
        lo = t - lookback + 1
        if lo >= floor:
            obs = self.matrix[lo : t + 1].copy()
        else:
            idx = np.maximum(np.arange(lo, t + 1), floor)
            obs = self.matrix[idx]
        if self.mode == "raw_scaled":
            obs[:, :3] = obs[:, :3] / obs[0, 2] - 1.0
        return obs

    def observe_many(self, ts: np.ndarray, lookback: int, floor: int = 0) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.int64)
        idx = np.maximum(ts[:, None] + np.arange(-lookback + 1, 1)[None, :], floor)
        obs = self.matrix[idx]
        if self.mode == "raw_scaled":
            obs[:, :, :3] = obs[:, :, :3] / obs[:, :1, 2:3] - 1.0
        return obs

    def without_llm(self) -> Features:
        m = self.matrix.copy()
        m[:, list(SENTIMENT_CHANNELS)] = 0.0
        return Features(m, self.mode)


def build_features(market: MarketData, mode: str = "returns", train_range: range | None = None) -> Features:
    """Six channels per minute; volume z-score statistics come from ``train_range`` only."""
    if mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature mode {mode!r}")
    o, h, l, c = market.open, market.high, market.low, market.close
    if np.any(np.concatenate([o, h, l, c]) <= 0):
        raise DataError("non-positive price in market data")
    n = len(c)
    train_range = train_range if train_range is not None else range(n)
    lv = np.log1p(market.volume)
    train_lv = lv[train_range.start : train_range.stop]
    mu, sd = float(train_lv.mean()), float(train_lv.std())
    vol = (lv - mu) / sd if sd >= STD_GUARD else np.zeros(n)
    sent = (market.sentiment - 3) / 2.0
    risk = (market.risk - 1) / 4.0
    m = np.empty((n, N_FEATURES))
    if mode == "returns":
        m[0, 0] = 0.0
        m[1:, 0] = np.log(c[1:] / c[:-1])
        m[:, 1] = (h - l) / c
        m[:, 2] = (c - o) / c
    else:
        m[:, 0], m[:, 1], m[:, 2] = h, l, c
    m[:, 3] = vol
    m[:, 4] = sent
    m[:, 5] = risk
    return Features(m, mode)

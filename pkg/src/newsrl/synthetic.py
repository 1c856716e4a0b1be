"""Deterministic synthetic markets and news used by fixtures, tests and the selftest."""

from __future__ import annotations

import math

import numpy as np

from .data import AlignedFrame, Bar, NewsItem

START_TS = 1577750400000  # 2019-12-31 00:00 UTC
MINUTE_MS = 60_000


def bars_from_closes(closes: np.ndarray, volumes: np.ndarray | None = None, wick: float = 0.0,
                     start_ts: int = START_TS, first_open: float | None = None) -> list[Bar]:
    """Bars with open = previous close and symmetric wicks of ``wick`` (fraction of price)."""
    closes = np.asarray(closes, dtype=np.float64)
    volumes = np.ones(len(closes)) if volumes is None else np.asarray(volumes, dtype=np.float64)
    opens = np.empty_like(closes)
    opens[0] = closes[0] if first_open is None else first_open
    opens[1:] = closes[:-1]
    bars = []
    for i, (o, c, v) in enumerate(zip(opens, closes, volumes)):
        hi = max(o, c) * (1 + wick)
        lo = min(o, c) * (1 - wick)
        bars.append(Bar(start_ts + i * MINUTE_MS, float(o), float(hi), float(lo), float(c), float(v)))
    return bars


def drift_sine_closes(n: int, base: float = 100.0, drift: float = 0.01, amplitude: float = 10.0,
                      period: float = 40.0) -> np.ndarray:
    t = np.arange(n, dtype=np.float64)
    return base + drift * t + amplitude * np.sin(2 * math.pi * t / period)


def drift_sine_frames(n: int, **kw) -> list[AlignedFrame]:
    """Noise-free drift-plus-sine market with neutral scores."""
    bars = bars_from_closes(drift_sine_closes(n, **kw))
    return [AlignedFrame(b.ts, b, 3, 3) for b in bars]


def random_walk_bars(n: int, seed: int = 0, start_price: float = 7200.0, vol: float = 0.0008,
                     wick: float = 0.0004) -> list[Bar]:
    """Geometric random walk minute bars with random intrabar wicks."""
    rng = np.random.default_rng(seed)
    rets = rng.normal(0.00002, vol, size=n)
    closes = start_price * np.exp(np.cumsum(rets))
    opens = np.concatenate([[start_price], closes[:-1]])
    up = np.abs(rng.normal(0, wick, size=n))
    down = np.abs(rng.normal(0, wick, size=n))
    volumes = np.exp(rng.normal(2.5, 0.6, size=n))
    bars = []
    for i in range(n):
        o, c = float(opens[i]), float(closes[i])
        bars.append(Bar(START_TS + i * MINUTE_MS, round(o, 2), round(float(max(o, c) * (1 + up[i])) + 0.01, 2),
                        round(float(min(o, c) * (1 - down[i])) - 0.01, 2), round(c, 2), round(float(volumes[i]), 4)))
    # rounding can break ordering; restore the invariant
    return [Bar(b.ts, b.open, max(b.high, b.open, b.close), min(b.low, b.open, b.close), b.close, b.volume)
            for b in bars]


_POSITIVE = ["rally", "surges", "adoption", "approval", "record high", "inflows"]
_NEGATIVE = ["crash", "plunges", "ban", "hack", "lawsuit", "outflows"]
_RISKY = ["volatility", "liquidation", "regulators", "uncertainty", "leverage"]


def synthetic_news(n_bars: int, every: int = 90, seed: int = 0) -> list[NewsItem]:
    rng = np.random.default_rng(seed)
    items = []
    for k, minute in enumerate(range(every // 2, n_bars, every)):
        mood = rng.choice(_POSITIVE if rng.random() < 0.5 else _NEGATIVE)
        risk = rng.choice(_RISKY) if rng.random() < 0.4 else "steady trading"
        mood, risk = str(mood), str(risk)
        title = f"Bitcoin {mood} as markets digest item {k}"
        body = f"Analysts cite {risk} while traders watch the {mood} narrative closely."
        items.append(NewsItem(START_TS + int(minute) * MINUTE_MS + int(rng.integers(0, 59_000)), title, body))
    return items


def lexicon_scores(item: NewsItem) -> tuple[int, int]:
    """Deterministic keyword scorer standing in for an LLM in fixtures."""
    text = f"{item.title} {item.body}".lower()
    pos = sum(w in text for w in _POSITIVE)
    neg = sum(w in text for w in _NEGATIVE)
    sentiment = 3 + min(2, pos) - min(2, neg)
    risk = 1 + min(4, sum(w in text for w in _RISKY) * 2 + neg)
    return max(1, min(5, sentiment)), max(1, min(5, risk))


FIXTURE_BARS = 12_000
FIXTURE_SEED = 0


def build_fixtures(out_dir, n_bars: int = FIXTURE_BARS, seed: int = FIXTURE_SEED) -> list:
    """Write the bundled bars, news and recorded scoring responses into ``out_dir``."""
    from pathlib import Path

    from .data import write_bars, write_news
    from .sentiment import LexiconResponder, RecordingResponder, make_batches

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bars = random_walk_bars(n_bars, seed)
    news = sorted(synthetic_news(n_bars, every=45, seed=seed), key=lambda n: (n.ts, n.title))
    write_bars(out / "bars.csv", bars)
    write_news(out / "news.jsonl", news)
    recorder = RecordingResponder(LexiconResponder(lexicon_scores))
    for batch in make_batches(news):
        recorder(batch.rendered_prompt)
    recorder.write(out / "llm_responses.jsonl")
    return [out / "bars.csv", out / "news.jsonl", out / "llm_responses.jsonl"]

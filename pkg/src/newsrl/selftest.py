"""Desk-scale end-to-end run on the bundled fixtures plus quick property checks."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .data import EpisodeWindow, chronological_split, load_frames, load_news
from .env import Position, Side, TradingEnv, apply_sltp, replay_equity, run_actions
from .pipeline import (RunSpec, align, build_report, endpoint_from_config, evaluate_top, fixture_path, ingest_bars,
                       ingest_news, load_dataset, score, tune_many, with_overrides)
from .sentiment import FixtureResponder, ScoreCache
from .tuner import check_early_stop

log = logging.getLogger(__name__)

MARKER = ".newsrl-selftest"
DEFAULT_RUNS = (RunSpec("ddqn", "mlp"), RunSpec("grpo", "mlp"), RunSpec("ddqn", "lstm"), RunSpec("ddqn", "lstm", True),
                RunSpec("ddqn", "transformer"), RunSpec("ddqn", "transformer", True))
SELFTEST_TUNER = {"desk_scale": True, "trials": 5}


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def __post_init__(self):
        self.ok = bool(self.ok)

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


class SelftestError(RuntimeError):
    pass


def prepare_dir(out_dir: Path) -> None:
    """Use an empty directory, or one a previous selftest created (its artifacts are replaced)."""
    if out_dir.exists() and any(p.name != "events.jsonl" for p in out_dir.iterdir()):
        if not (out_dir / MARKER).exists():
            raise SelftestError(f"{out_dir} is not empty and was not created by selftest")
        import shutil

        for name in ("data", "runs", "report"):
            if (out_dir / name).exists():
                shutil.rmtree(out_dir / name)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / MARKER).write_text("selftest output directory\n", encoding="utf-8")


def selftest_config(out_dir: Path, seed: int) -> RunConfig:
    cfg = RunConfig()
    data = {"bars": str(out_dir / "data" / "bars.csv"), "news": str(out_dir / "data" / "news.jsonl"),
            "cache": str(out_dir / "data" / "scores.jsonl"), "frames": str(out_dir / "data" / "frames.csv"),
            "out_dir": str(out_dir / "runs")}
    return with_overrides(cfg, data=data, tuner={**SELFTEST_TUNER, "seed": seed},
                          llm={"offline": True, "fixtures": str(fixture_path("llm_responses.jsonl"))})


# ---------------------------------------------------------------- checks


def check_accounting(frames_path: Path, n_pairs: int = 50, seed: int = 0) -> Check:
    ds = load_dataset(frames_path)
    rng = np.random.default_rng(seed)
    env = TradingEnv(ds.market, ds.features)
    env.emit_observations = False
    worst = 0.0
    for _ in range(n_pairs):
        length = int(rng.integers(2, 400))
        start = int(rng.integers(1, len(ds.market.close) - length))
        w = EpisodeWindow(start, length)
        actions = rng.integers(0, 3, size=length - 1)
        rewards, equity = run_actions(env, w, actions)
        final, _ = replay_equity(ds.market, w, actions)
        worst = max(worst, abs(rewards.sum() - (equity[-1] - equity[0])), abs(final - equity[-1]))
    return Check("accounting identity", worst <= 1e-9, f"max deviation {worst:.2e} over {n_pairs} windows")


def check_sltp() -> Check:
    e = 100.0
    long_tp = apply_sltp(Position(Side.LONG, e), high=100.2, low=99.95)
    both = apply_sltp(Position(Side.LONG, e), high=100.15, low=99.85)
    short_tp = apply_sltp(Position(Side.SHORT, e), high=100.05, low=99.8)
    ok = (long_tp is not None and long_tp.reason == "tp" and abs(long_tp.price - 100.1) < 1e-9
          and abs(long_tp.realized - 0.1) < 1e-9
          and both is not None and both.reason == "sl" and abs(both.price - 99.9) < 1e-9
          and short_tp is not None and short_tp.reason == "tp" and abs(short_tp.price - 99.9) < 1e-9
          and abs(short_tp.realized - 0.1) < 1e-9)
    return Check("sl/tp worked examples", ok)


def check_protocol() -> Check:
    s = chronological_split(list(range(100)))
    split_ok = (s.train, s.validation, s.test) == (range(0, 70), range(70, 85), range(85, 100))
    stop_ok = check_early_stop([3, 2, 2, 2, 2, 2]) and not check_early_stop([3, 2, 2, 2, 4])
    return Check("split fractions and early stop", split_ok and stop_ok)


def check_alignment(frames_path: Path, news_path: Path, cache_path: Path, model: str) -> Check:
    frames = load_frames(frames_path)
    cache = ScoreCache(cache_path)
    news = load_news(news_path)
    scores = [(n.ts, cache.get(n.id, model)) for n in news]
    in_range = all(1 <= r.sentiment <= 5 and 1 <= r.risk <= 5 for _, r in scores)
    times = np.array([t for t, _ in scores])
    bad = 0
    for f in frames:
        k = int(np.searchsorted(times, f.ts, side="right")) - 1
        want = (3, 3) if k < 0 else (scores[k][1].sentiment, scores[k][1].risk)
        bad += (f.sentiment, f.risk) != want
    return Check("no look-ahead in aligned scores", in_range and bad == 0,
                 f"{len(frames)} frames, {len(news)} news, {bad} mismatches")


# ------------------------------------------------------------------ main


def run_selftest(out_dir: str | Path, seed: int = 1, specs: Sequence[RunSpec] = DEFAULT_RUNS, jobs: int = 1,
                 trials: int | None = None, echo: Callable[[str], None] = print) -> list[Check]:
    out = Path(out_dir)
    prepare_dir(out)
    cfg = selftest_config(out, seed)
    if trials is not None:
        cfg = with_overrides(cfg, tuner={"trials": trials})
    cfg.write_resolved(out)
    checks: list[Check] = []
    t0 = time.perf_counter()

    def add(check: Check) -> None:
        checks.append(check)
        echo(check.line())

    n_bars = ingest_bars(fixture_path("bars.csv"), cfg.data.bars)
    n_news = ingest_news(fixture_path("news.jsonl"), cfg.data.news)
    add(Check("ingest", n_bars > 0 and n_news > 0, f"{n_bars} bars, {n_news} news"))

    endpoint = endpoint_from_config(cfg)
    first = FixtureResponder(endpoint.fixtures)
    n_scored = score(cfg.data.news, cfg.data.cache, endpoint, first)
    second = FixtureResponder(endpoint.fixtures)
    score(cfg.data.news, cfg.data.cache, endpoint, second)
    add(Check("score-news offline and idempotent", n_scored == n_news and second.calls == 0,
              f"{first.calls} requests, then {second.calls} on rerun"))

    n_frames = align(cfg.data.bars, cfg.data.news, cfg.data.cache, endpoint.model, cfg.data.frames)
    add(check_alignment(Path(cfg.data.frames), Path(cfg.data.news), Path(cfg.data.cache), endpoint.model))
    add(check_accounting(Path(cfg.data.frames), seed=seed))
    add(check_sltp())
    add(check_protocol())

    runs = Path(cfg.data.out_dir)
    tune_many(cfg, specs, runs, cfg.tuner.trials, seed, jobs)
    stored = {s.name: sum(1 for _ in open(runs / f"trials_{s.name}.jsonl", encoding="utf-8")) for s in specs}
    add(Check("tune", all(v == cfg.tuner.trials for v in stored.values()),
              ", ".join(f"{k}={v}" for k, v in stored.items()) + f" trials of {n_frames} frames"))

    for spec in specs[:1]:
        mean, _ = evaluate_top(cfg, runs, spec, 1, load_dataset(cfg.data.frames, cfg.features.mode, spec.no_llm))
        add(Check(f"top-1 evaluate {spec.name}", bool(np.isfinite(mean)), f"{mean:.4f} USDT"))

    files = build_report(cfg, runs, out / "report", specs, jobs)
    names = {p.name for p in files}
    add(Check("report", {"table1.csv", "table2.csv", "backtest.svg", "summary.md"} <= names,
              f"{len(files)} files in {out / 'report'}"))

    summary = {"seed": seed, "runs": [s.name for s in specs], "checks": [[c.name, bool(c.ok)] for c in checks]}
    (out / "report" / "selftest.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    n_ok = sum(c.ok for c in checks)
    echo(f"selftest: {n_ok}/{len(checks)} checks passed in {time.perf_counter() - t0:.1f}s")
    return checks

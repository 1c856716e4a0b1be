"""End-to-end stages shared by the CLI and the selftest.

Each stage reads and writes plain files, so any stage can be rerun on its own.
Runs live under one directory: ``trials_<run>.jsonl`` stores plus
``checkpoints/<run>/trial_XXXX.json``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .agents import Agent
from .config import RunConfig
from .data import DataError, load_bars, load_frames, load_news, write_bars, write_frames, write_news, forward_fill_scores
from .evaluation import (ROW_KEYS, TABLE_ROWS, BacktestCurve, baseline_buy_hold, emit_report, evaluate_periods,
                         full_backtest, topk_average)
from .sentiment import EndpointConfig, ScoreCache, score_news
from .training import Dataset, TrainBudget
from .tuner import TrialRecord, TrialStore, rank_trials, tune

log = logging.getLogger(__name__)

ALGOS = ("ddqn", "grpo")
NETS = ("mlp", "lstm", "transformer")


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("newsrl") / "fixtures" / name))


@dataclass(frozen=True)
class RunSpec:
    algo: str
    net: str
    no_llm: bool = False

    @property
    def name(self) -> str:
        return f"{self.algo}_{self.net}" + ("_nollm" if self.no_llm else "")

    @property
    def row(self) -> str:
        return next(r for r, key in ROW_KEYS.items() if key == (self.net, self.no_llm))

    @classmethod
    def parse(cls, text: str) -> RunSpec:
        """``algo:net`` or ``algo:net:nollm``."""
        parts = text.split(":")
        if len(parts) not in (2, 3) or parts[0] not in ALGOS or parts[1] not in NETS or parts[2:] not in ([], ["nollm"]):
            raise ValueError(f"bad run spec {text!r}; expected algo:net[:nollm]")
        return cls(parts[0], parts[1], len(parts) == 3)


ALL_RUNS = tuple(RunSpec(a, net, nl) for a in ALGOS for net, nl in ROW_KEYS.values())


def store_path(runs_dir: str | Path, spec: RunSpec) -> Path:
    return Path(runs_dir) / f"trials_{spec.name}.jsonl"


def checkpoint_dir(runs_dir: str | Path, spec: RunSpec) -> Path:
    return Path(runs_dir) / "checkpoints" / spec.name


# ------------------------------------------------------------------- data


def ingest_bars(src: str | Path, dst: str | Path) -> int:
    bars = load_bars(src)
    Path(dst).parent.mkdir(parents=True, exist_ok=True)
    write_bars(dst, bars)
    return len(bars)


def ingest_news(src: str | Path, dst: str | Path) -> int:
    items = load_news(src)
    seen = set()
    unique = []
    for it in items:
        if it.id not in seen:
            seen.add(it.id)
            unique.append(it)
    if len(unique) < len(items):
        log.warning("dropped %d duplicate news items", len(items) - len(unique))
    Path(dst).parent.mkdir(parents=True, exist_ok=True)
    write_news(dst, unique)
    return len(unique)


def endpoint_from_config(cfg: RunConfig) -> EndpointConfig:
    llm = cfg.llm
    return EndpointConfig(base_url=llm.base_url, model=llm.model, api_key_env=llm.api_key_env, timeout=llm.timeout,
                          max_retries=llm.max_retries, backoff=llm.backoff, char_budget=llm.char_budget,
                          max_in_flight=llm.max_in_flight, offline=llm.offline,
                          fixtures=llm.fixtures or str(fixture_path("llm_responses.jsonl")))


def score(news_path: str | Path, cache_path: str | Path, endpoint: EndpointConfig, responder=None) -> int:
    items = load_news(news_path)
    cache = ScoreCache(cache_path)
    before = len(cache)
    score_news(items, endpoint, cache, responder)
    return len(cache) - before


class _Scored(NamedTuple):
    ts: int
    sentiment: int
    risk: int


def align(bars_path: str | Path, news_path: str | Path, cache_path: str | Path, model: str,
          dst: str | Path) -> int:
    bars = load_bars(bars_path)
    cache = ScoreCache(cache_path)
    scored = []
    for it in load_news(news_path):
        rec = cache.get(it.id, model)
        if rec is None:
            raise DataError(f"news item {it.id} has no {model} score in {cache_path}; run score-news first")
        scored.append(_Scored(it.ts, rec.sentiment, rec.risk))
    frames = forward_fill_scores(bars, scored)
    Path(dst).parent.mkdir(parents=True, exist_ok=True)
    write_frames(dst, frames)
    return len(frames)


def load_dataset(frames_path: str | Path, mode: str = "returns", no_llm: bool = False) -> Dataset:
    return Dataset.from_frames(load_frames(frames_path), mode, no_llm)


def budget_from_config(cfg: RunConfig) -> TrainBudget:
    t = cfg.tuner
    budget = TrainBudget(episodes=t.episodes, episode_length=cfg.env.episode_length, eval_interval=t.eval_interval,
                         n_eval=t.n_eval, eval_length=cfg.eval.length, patience=t.patience, eval_seed=cfg.eval.seed,
                         sltp=cfg.env.sltp, fee_bps=cfg.env.fee_bps)
    return budget.desk() if t.desk_scale else budget


def eval_budget(cfg: RunConfig) -> tuple[int, int]:
    """(count, length) of test-period windows: the config values, shrunk with the desk preset."""
    if cfg.tuner.desk_scale:
        return max(1, cfg.eval.count // 16), max(2, cfg.eval.length // 20)
    return cfg.eval.count, cfg.eval.length


# ----------------------------------------------------------------- tuning


def tune_run(cfg: RunConfig, spec: RunSpec, runs_dir: str | Path, trials: int, seed: int,
             dataset: Dataset | None = None) -> list[TrialRecord]:
    dataset = dataset or load_dataset(cfg.data.frames, cfg.features.mode, spec.no_llm)
    store = TrialStore(store_path(runs_dir, spec))
    return tune(store, spec.algo, spec.net, dataset, budget_from_config(cfg), trials, seed,
                checkpoint_dir(runs_dir, spec))


def _tune_job(args) -> str:
    cfg, spec, runs_dir, trials, seed = args
    tune_run(cfg, spec, runs_dir, trials, seed)
    return spec.name


def tune_many(cfg: RunConfig, specs: Sequence[RunSpec], runs_dir: str | Path, trials: int, seed: int,
              jobs: int = 1) -> None:
    """Tune several run specs; with ``jobs > 1`` each spec runs in its own process."""
    jobs_args = [(cfg, s, runs_dir, trials, seed) for s in specs]
    if jobs <= 1:
        for a in jobs_args:
            _tune_job(a)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for name in pool.map(_tune_job, jobs_args):
            log.info("tuned %s", name)


# ------------------------------------------------------------- evaluation


def ranked_agents(runs_dir: str | Path, spec: RunSpec, k: int) -> list[tuple[TrialRecord, Agent]]:
    store = TrialStore(store_path(runs_dir, spec))
    out = []
    for rec in rank_trials(store.load(), k):
        if rec.checkpoint_ref is None:
            raise DataError(f"trial {rec.trial_id} of {spec.name} has no checkpoint")
        out.append((rec, Agent.load(store.path.parent / rec.checkpoint_ref)))
    return out


def evaluate_top(cfg: RunConfig, runs_dir: str | Path, spec: RunSpec, k: int, dataset: Dataset,
                 split: str = "test") -> tuple[float, list[float]]:
    count, length = eval_budget(cfg)
    ranked = ranked_agents(runs_dir, spec, k)
    return topk_average(ranked, k, lambda ra: evaluate_periods(ra[1], dataset, split, count, length, cfg.eval.seed,
                                                                cfg.env.sltp, cfg.env.fee_bps)[0])


def backtest_top(cfg: RunConfig, runs_dir: str | Path, spec: RunSpec, dataset: Dataset, rank: int = 0,
                 trace_path: str | Path | None = None) -> BacktestCurve:
    _, agent = ranked_agents(runs_dir, spec, rank + 1)[rank]
    return full_backtest(agent, dataset, "test", cfg.env.sltp, cfg.env.fee_bps, trace_path)


def _finished(runs_dir: str | Path, spec: RunSpec) -> int:
    return sum(r.status in ("completed", "early_stopped") for r in TrialStore(store_path(runs_dir, spec)).load())


def _report_cells(args) -> tuple[RunSpec, dict, dict, BacktestCurve | None]:
    cfg, runs_dir, spec = args
    ds = load_dataset(cfg.data.frames, cfg.features.mode, spec.no_llm)
    n = _finished(runs_dir, spec)
    t1, t2, curve = {}, {}, None
    for k in (1, 10):
        if n < k:
            continue
        col = f"{spec.algo}_top{k}"
        t1[col], _ = evaluate_top(cfg, runs_dir, spec, k, ds)
        curves = [full_backtest(a, ds, "test", cfg.env.sltp, cfg.env.fee_bps) for _, a in ranked_agents(runs_dir, spec, k)]
        t2[col] = float(np.mean([c.pct_return for c in curves]))
        if k == 1:
            curve = curves[0]
    return spec, t1, t2, curve


def build_report(cfg: RunConfig, runs_dir: str | Path, out_dir: str | Path, specs: Sequence[RunSpec] = ALL_RUNS,
                 jobs: int = 1) -> list[Path]:
    """Table 1 (mean sampled-period USDT), Table 2 (full-backtest percent), curves and the SVG overlay.

    Top-10 cells stay empty for runs with fewer than ten finished trials.
    """
    present = [s for s in specs if store_path(runs_dir, s).exists()]
    if not present:
        raise DataError(f"no trial stores found in {runs_dir}")
    args = [(cfg, runs_dir, s) for s in present]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_report_cells, args))
    else:
        results = [_report_cells(a) for a in args]
    table1 = {row: {} for row in TABLE_ROWS}
    table2 = {row: {} for row in TABLE_ROWS}
    curves = {}
    for spec, t1, t2, curve in results:
        table1[spec.row].update(t1)
        table2[spec.row].update(t2)
        if curve is not None:
            curves[spec.name] = curve
    ds = load_dataset(cfg.data.frames, cfg.features.mode)
    test = ds.split.test
    m = ds.market
    baseline = BacktestCurve(m.ts[test.start : test.stop].copy(), m.close[test.start : test.stop].copy(),
                             np.zeros(len(test), dtype=np.int64), m.close[test.start : test.stop].copy())
    return emit_report(out_dir, table1, table2, curves, baseline, baseline_buy_hold(ds))


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """Copy of ``cfg`` with fields replaced per section, e.g. ``tuner={"trials": 5}``."""
    out = replace(cfg)
    for name, values in sections.items():
        setattr(out, name, replace(getattr(cfg, name), **values))
    return out.validate()

"""Sampled-period returns, top-K averaging, full-period backtests and report files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .agents import Agent, batched_scores
from .data import DataError, EpisodeWindow, sample_windows
from .env import DEFAULT_SLTP, Side, TradingEnv
from .training import Dataset

TABLE_ROWS = ["MLP", "LSTM", "Transformer", "LSTM (Without LLM signal)", "Transformer (Without LLM signal)"]
ROW_KEYS = {"MLP": ("mlp", False), "LSTM": ("lstm", False), "Transformer": ("transformer", False),
            "LSTM (Without LLM signal)": ("lstm", True), "Transformer (Without LLM signal)": ("transformer", True)}
TABLE_COLUMNS = ["ddqn_top1", "ddqn_top10", "grpo_top1", "grpo_top10"]
DEFAULT_EVAL_SEED = 7


@dataclass(frozen=True)
class PeriodResult:
    window: EpisodeWindow
    cumulative_return_usdt: float
    pct_return: float


@dataclass
class BacktestCurve:
    ts: np.ndarray
    equity: np.ndarray
    side: np.ndarray
    close: np.ndarray

    @property
    def pct_return(self) -> float:
        return float(self.equity[-1] / self.equity[0] - 1.0)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ts", "equity", "side", "close"])
            for row in zip(self.ts, self.equity, self.side, self.close):
                w.writerow([int(row[0]), repr(float(row[1])), int(row[2]), repr(float(row[3]))])

    @classmethod
    def read_csv(cls, path: str | Path) -> BacktestCurve:
        rows = list(csv.reader(open(path, encoding="utf-8")))[1:]
        cols = list(zip(*rows)) if rows else [(), (), (), ()]
        return cls(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=float),
                   np.array(cols[2], dtype=np.int64), np.array(cols[3], dtype=float))


def _check_mode(agent: Agent, dataset: Dataset) -> None:
    if agent.feature_mode != dataset.features.mode:
        raise DataError(f"agent feature mode {agent.feature_mode!r} does not match dataset mode {dataset.features.mode!r}")


def policy_actions(agent: Agent, dataset: Dataset, states: np.ndarray, floor: int) -> np.ndarray:
    obs_fn = dataset.obs_fn(agent.net.window, floor)
    return np.argmax(batched_scores(agent.net, agent.params, obs_fn, states), axis=-1)


def evaluate_periods(agent: Agent, dataset: Dataset, split_tag: str = "test", count: int = 256, length: int = 3000,
                     seed: int = DEFAULT_EVAL_SEED, sltp: float = DEFAULT_SLTP, fee_bps: float = 0.0,
                     ) -> tuple[float, list[PeriodResult]]:
    """Mean cumulative USDT return of the greedy policy over sampled windows of one split."""
    _check_mode(agent, dataset)
    rng = dataset.split[split_tag]
    windows = sample_windows(rng, length, agent.net.window, count, seed, split_tag)
    env = TradingEnv(dataset.market, dataset.features, sltp, fee_bps)
    env.emit_observations = False
    results = []
    for w in windows:
        assert rng.start <= w.start - agent.net.window and w.stop <= rng.stop
        actions = policy_actions(agent, dataset, np.arange(w.start, w.stop - 1), rng.start)
        env.reset(w, agent.net.window)
        for a in actions:
            env.step(int(a))
        results.append(PeriodResult(w, env.equity - env.initial_equity, env.equity / env.initial_equity - 1.0))
    mean = float(np.mean([r.cumulative_return_usdt for r in results]))
    return mean, results


def full_backtest(agent: Agent, dataset: Dataset, split_tag: str = "test", sltp: float = DEFAULT_SLTP,
                  fee_bps: float = 0.0, trace_path: str | Path | None = None) -> BacktestCurve:
    """One continuous episode over the whole split; early observations are edge-padded."""
    _check_mode(agent, dataset)
    rng = dataset.split[split_tag]
    window = EpisodeWindow(rng.start, len(rng), split_tag)
    env = TradingEnv(dataset.market, dataset.features, sltp, fee_bps, record_trace=trace_path is not None)
    env.emit_observations = False
    actions = policy_actions(agent, dataset, np.arange(window.start, window.stop - 1), rng.start)
    env.reset(window, agent.net.window, floor=rng.start)
    equity = [env.equity]
    sides = [int(Side.FLAT)]
    for a in actions:
        env.step(int(a))
        equity.append(env.equity)
        sides.append(int(env.position.side))
    m = dataset.market
    curve = BacktestCurve(m.ts[rng.start : rng.stop].copy(), np.array(equity), np.array(sides),
                          m.close[rng.start : rng.stop].copy())
    if trace_path is not None:
        env.write_trace(trace_path)
    return curve


def baseline_buy_hold(dataset_or_close, split_range: range | None = None) -> float:
    close = dataset_or_close.market.close if hasattr(dataset_or_close, "market") else np.asarray(dataset_or_close)
    if split_range is None:
        split_range = dataset_or_close.split.test if hasattr(dataset_or_close, "split") else range(len(close))
    if len(split_range) == 0:
        raise DataError("empty split")
    return float(close[split_range.stop - 1] / close[split_range.start] - 1.0)


def topk_average(ranked: Sequence, k: int, evaluate: Callable[[object], float]) -> tuple[float, list[float]]:
    """Evaluate the first ``k`` ranked trials independently and average their metrics."""
    if len(ranked) < k:
        raise ValueError(f"need {k} trials, have {len(ranked)}")
    metrics = [float(evaluate(t)) for t in ranked[:k]]
    return float(np.mean(metrics)), metrics


# -------------------------------------------------------------------- report


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.6g}"


def write_table(path: str | Path, table: Mapping[str, Mapping[str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["networks"] + TABLE_COLUMNS)
        for row in TABLE_ROWS:
            cells = table.get(row, {})
            w.writerow([row] + [_fmt(cells.get(c)) for c in TABLE_COLUMNS])


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name.lower()).strip("_")


PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
           "#bcbd22", "#7f7f7f"]


def render_svg(curves: Mapping[str, BacktestCurve], baseline: BacktestCurve | None, width: int = 900,
               height: int = 420) -> str:
    """Equity curves (USDT, left axis) over the gray price baseline; right axis shows percent."""
    pad_l, pad_r, pad_t, pad_b = 70, 70, 20, 40
    series = {name: c.equity - c.equity[0] for name, c in sorted(curves.items())}
    base = None
    if baseline is not None:
        base = baseline.close - baseline.close[0]
    all_vals = np.concatenate([v for v in series.values()] + ([base] if base is not None else []) + [np.zeros(1)])
    lo, hi = float(all_vals.min()), float(all_vals.max())
    if hi - lo < 1e-12:
        hi = lo + 1.0
    n = max(len(v) for v in list(series.values()) + ([base] if base is not None else []) + [np.zeros(2)])
    ref = baseline.close[0] if baseline is not None else (next(iter(curves.values())).equity[0] if curves else 1.0)

    def pts(vals):
        xs = pad_l + (width - pad_l - pad_r) * np.arange(len(vals)) / max(1, n - 1)
        ys = pad_t + (height - pad_t - pad_b) * (hi - vals) / (hi - lo)
        step = max(1, len(vals) // 2000)
        return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs[::step], ys[::step]))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    plot_bottom = height - pad_b
    out.append(f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{plot_bottom}" stroke="black"/>')
    out.append(f'<line x1="{width - pad_r}" y1="{pad_t}" x2="{width - pad_r}" y2="{plot_bottom}" stroke="black"/>')
    for frac in (0.0, 0.5, 1.0):
        v = lo + frac * (hi - lo)
        y = pad_t + (height - pad_t - pad_b) * (1 - frac)
        out.append(f'<text x="{pad_l - 5}" y="{y:.2f}" font-size="10" text-anchor="end">{v:.1f} USDT</text>')
        out.append(f'<text x="{width - pad_r + 5}" y="{y:.2f}" font-size="10">{100 * v / ref:.1f}%</text>')
    if base is not None:
        out.append(f'<polyline class="baseline" fill="none" stroke="gray" stroke-width="1" points="{pts(base)}"/>')
    for i, (name, vals) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<polyline class="curve" data-config="{name}" fill="none" stroke="{color}" stroke-width="1.2" '
                   f'points="{pts(vals)}"/>')
        out.append(f'<text x="{pad_l + 10}" y="{pad_t + 14 * (i + 1)}" font-size="11" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(out_dir: str | Path, table1: Mapping, table2: Mapping, curves: Mapping[str, BacktestCurve],
                baseline: BacktestCurve | None = None, baseline_pct: float | None = None) -> list[Path]:
    """Write table1/table2 CSVs, per-config curves, the overlay SVG and a markdown summary."""
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    files = [out / "table1.csv", out / "table2.csv"]
    write_table(files[0], table1)
    write_table(files[1], table2)
    for name, curve in sorted(curves.items()):
        p = out / "curves" / f"{_slug(name)}.csv"
        curve.write_csv(p)
        files.append(p)
    svg = out / "backtest.svg"
    svg.write_text(render_svg(curves, baseline), encoding="utf-8")
    files.append(svg)
    lines = ["# Backtest summary", "",
             "Averaged cumulative return over sampled periods (USDT):", "", _md_table(table1), "",
             "Full test-period backtest return (percent change):", "", _md_table(table2, pct=True), ""]
    lines.append("Empty cells: the run was not tuned, or it has fewer finished trials than the column needs.")
    lines.append("")
    if baseline_pct is not None:
        lines.append(f"Buy-and-hold baseline over the test period: {100 * baseline_pct:.2f}%")
        lines.append("")
    summary = out / "summary.md"
    summary.write_text("\n".join(lines), encoding="utf-8")
    files.append(summary)
    return files


def _md_table(table: Mapping, pct: bool = False) -> str:
    head = "| Networks | DDQN Top1 | DDQN Top10 | GRPO Top1 | GRPO Top10 |\n|---|---|---|---|---|"
    rows = []
    for row in TABLE_ROWS:
        cells = table.get(row, {})
        vals = []
        for c in TABLE_COLUMNS:
            v = cells.get(c)
            vals.append("" if v is None else (f"{100 * v:.1f}%" if pct else f"{v:.1f}"))
        rows.append(f"| {row} | " + " | ".join(vals) + " |")
    return head + "\n" + "\n".join(rows)

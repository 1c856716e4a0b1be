"""Acceptance criteria; each test prints one PASS/FAIL line (also collected in the terminal summary)."""

import hashlib
import itertools
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import grpo_group, train_chain_ddqn, value_iteration

from newsrl import agents as A
from newsrl.agents import Agent
from newsrl.data import EpisodeWindow, chronological_split, load_frames, load_news, sample_windows
from newsrl.env import Position, Side, TradingEnv, apply_sltp, replay_equity, run_actions
from newsrl.evaluation import evaluate_periods, topk_average
from newsrl.gradcheck import check_network
from newsrl.networks import Lstm, LstmConfig, Mlp, MlpConfig, Transformer, TransformerConfig
from newsrl.pipeline import align, endpoint_from_config, fixture_path, ingest_bars, ingest_news, load_dataset, score
from newsrl.config import RunConfig
from newsrl.sanity import run_sanity, sanity_dataset
from newsrl.selftest import run_selftest
from newsrl.sentiment import FixtureResponder, ScoreCache, make_batches, parse_scores
from newsrl.tensor import AdamW
from newsrl.synthetic import bars_from_closes, random_walk_bars
from newsrl.data import AlignedFrame
from newsrl.training import Dataset
from newsrl.tuner import TrialRecord, check_early_stop, rank_trials


def verdict(n: int, name: str, ok: bool, detail: str, elapsed: float, limit: float) -> None:
    ok = bool(ok) and elapsed < limit
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {name} ({detail}; {elapsed:.1f}s of {limit:.0f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def fixture_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("fixture_data")
    ingest_bars(fixture_path("bars.csv"), d / "bars.csv")
    ingest_news(fixture_path("news.jsonl"), d / "news.jsonl")
    endpoint = endpoint_from_config(RunConfig())
    endpoint.offline = True
    score(d / "news.jsonl", d / "scores.jsonl", endpoint)
    align(d / "bars.csv", d / "news.jsonl", d / "scores.jsonl", endpoint.model, d / "frames.csv")
    return d, endpoint.model


# ------------------------------------------------------------------------ 1


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    nets = {"mlp": Mlp(MlpConfig(8, 8), 6), "lstm": Lstm(LstmConfig(hidden=8, window=4), 6),
            "transformer": Transformer(TransformerConfig(layers=1, heads=2, model_dim=8, ff_dim=16, window=4), 6)}
    worst = {k: max(check_network(net, seed) for seed in range(20)) for k, net in nets.items()}
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, "gradients match central differences within 1e-4 over 20 seeds", max(worst.values()) < 1e-4,
            detail, time.perf_counter() - t0, 60)


# ------------------------------------------------------------------------ 2


def test_criterion_2_accounting_identity(fixture_data):
    t0 = time.perf_counter()
    ds = load_dataset(fixture_data[0] / "frames.csv")
    m = ds.market
    rng = np.random.default_rng(2024)
    env = TradingEnv(m, ds.features)
    env.emit_observations = False
    worst_identity = worst_replay = 0.0
    for _ in range(1000):
        length = int(rng.integers(2, 500))
        start = int(rng.integers(1, len(m) - length + 1))
        w = EpisodeWindow(start, length)
        actions = rng.integers(0, 3, size=length - 1)
        rewards, equity = run_actions(env, w, actions)
        final, _ = replay_equity(m, w, actions)
        worst_identity = max(worst_identity, abs(rewards.sum() - (equity[-1] - equity[0])))
        worst_replay = max(worst_replay, abs(final - equity[-1]))
    net = Mlp(MlpConfig(8, 8), 6)
    agent = Agent("ddqn", net, net.init_params(3))
    worst_eval = 0.0
    for split in ("validation", "test"):
        _, results = evaluate_periods(agent, ds, split, 32, 300, seed=5)
        for r in results:
            w = r.window
            obs = ds.features.observe_many(np.arange(w.start, w.stop - 1), 1, ds.split[split].start)
            final, _ = replay_equity(m, w, agent.greedy(obs))
            worst_eval = max(worst_eval, abs(r.cumulative_return_usdt - (final - m.close[w.start])))
    ok = max(worst_identity, worst_replay, worst_eval) <= 1e-9
    detail = f"identity {worst_identity:.1e}, env vs replay {worst_replay:.1e}, evaluation vs replay {worst_eval:.1e}"
    verdict(2, "sum of rewards equals equity change; evaluation equals replay", ok, detail,
            time.perf_counter() - t0, 60)


# ------------------------------------------------------------------------ 3


def test_criterion_3_sltp_semantics():
    t0 = time.perf_counter()
    long_tp = apply_sltp(Position(Side.LONG, 100.0), high=100.2, low=99.95)
    tie = apply_sltp(Position(Side.LONG, 100.0), high=100.15, low=99.85)
    short_tp = apply_sltp(Position(Side.SHORT, 100.0), high=100.05, low=99.8)
    examples = (long_tp.reason == "tp" and math.isclose(long_tp.price, 100.1, abs_tol=1e-12)
                and math.isclose(long_tp.realized, 0.1, abs_tol=1e-12)
                and tie.reason == "sl" and math.isclose(tie.price, 99.9, abs_tol=1e-12)
                and short_tp.reason == "tp" and math.isclose(short_tp.price, 99.9, abs_tol=1e-12)
                and math.isclose(short_tp.realized, 0.1, abs_tol=1e-12))
    worst = 0.0  # largest loss as a fraction of entry notional
    trades = 0
    rng = np.random.default_rng(3)
    for _ in range(40):
        closes = 100 * np.exp(np.cumsum(rng.normal(0, 0.0015, 1000)))
        bars = bars_from_closes(closes, wick=float(rng.uniform(0, 0.002)))
        ds = Dataset.from_frames([AlignedFrame(b.ts, b, 3, 3) for b in bars])
        env = TradingEnv(ds.market, ds.features)
        env.emit_observations = False
        env.reset(EpisodeWindow(1, 999))
        entry = 0.0
        while not env.done:
            for fill in env.step(int(rng.integers(0, 3))).info["fills"]:
                if fill.reason == "open":
                    entry = fill.price
                else:
                    trades += 1
                    worst = max(worst, -fill.realized / entry)
    ok = examples and worst <= 0.001 + 1e-12
    verdict(3, "SL/TP worked examples and 0.1% loss bound on gapless bars", ok,
            f"examples {'ok' if examples else 'wrong'}, worst loss {100 * worst:.4f}% over {trades} trades",
            time.perf_counter() - t0, 10)


# ------------------------------------------------------------------------ 4


def test_criterion_4_ddqn_tabular_fixed_point():
    t0 = time.perf_counter()
    err = float(np.abs(train_chain_ddqn(seed=0) - value_iteration(0.9)).max())
    verdict(4, "DDQN on a 5-state chain matches value iteration within 1e-2", err <= 1e-2, f"max error {err:.1e}",
            time.perf_counter() - t0, 30)


# ------------------------------------------------------------------------ 5


def _argmax_after_update(returns, seed):
    net = Mlp(MlpConfig(8, 8), 4)
    p = net.init_params(seed)
    rng = np.random.default_rng(seed)
    states = rng.normal(size=(10, 1, 4))
    group = grpo_group(returns, states, rng.integers(0, 3, (len(returns), 10)), A.log_softmax_np(net.scores(p, states)))
    hyper = A.GrpoHyper(repeat_times=4, batch_size=16, lr=0.05, weight_decay=0.0, kl_target=1.0)
    opt = AdamW(lr=hyper.lr, weight_decay=hyper.weight_decay)
    params, *_ = A.grpo_update(net, p, group, hyper, opt, np.random.default_rng(seed + 1))
    return net.scores(params, states).argmax(axis=1)


def test_criterion_5_grpo_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst_mean = worst_std = worst_shift = 0.0
    for _ in range(1000):
        g = int(rng.integers(2, 33))
        r = rng.normal(rng.uniform(-500, 500), rng.uniform(0.1, 300), size=g)
        adv = A.grpo_advantages(r)
        worst_mean = max(worst_mean, abs(adv.mean()))
        worst_std = max(worst_std, abs(adv.std() - 1))
        worst_shift = max(worst_shift, float(np.abs(A.grpo_advantages(r + rng.uniform(-1e3, 1e3)) - adv).max()))
    flips = 0
    for seed in range(20):
        r = np.random.default_rng(100 + seed).normal(0, 50, 8)
        base = _argmax_after_update(r, seed)
        for scale in (1e-3, 0.5, 7.0, 1e4):
            flips += int(not np.array_equal(base, _argmax_after_update(r * scale, seed)))
    ok = worst_mean <= 1e-9 and worst_std <= 1e-9 and worst_shift <= 1e-9 and flips == 0
    detail = (f"|mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}, shift {worst_shift:.1e}, "
              f"{flips} argmax changes over 80 rescalings")
    verdict(5, "GRPO advantages normalized, shift and scale invariant", ok, detail, time.perf_counter() - t0, 30)


# ------------------------------------------------------------------------ 6


def test_criterion_6_learning_sanity():
    t0 = time.perf_counter()
    ds = sanity_dataset()
    ratios = {algo: float(np.mean([run_sanity(algo, seed, ds).ratio for seed in range(3)])) for algo in ("ddqn", "grpo")}
    ok = all(v >= 0.9 for v in ratios.values())
    verdict(6, "DDQN+MLP and GRPO+MLP reach 90% of the oracle return", ok,
            ", ".join(f"{k} {100 * v:.1f}%" for k, v in ratios.items()), time.perf_counter() - t0, 600)


# ------------------------------------------------------------------------ 7


def _stop_oracle(h, patience=5):
    running = [max(h[: i + 1]) for i in range(len(h))]
    return len(h) > patience and not running[-1] > running[-1 - patience]


def test_criterion_7_protocol_fidelity():
    t0 = time.perf_counter()
    s = chronological_split(list(range(100)))
    split_ok = (s.train, s.validation, s.test) == (range(0, 70), range(70, 85), range(85, 100))
    histories = [list(h) for n in range(9) for vals in ((0, 1), (0, 1, 2)) for h in itertools.product(vals, repeat=n)]
    stop_ok = all(check_early_stop(h) == _stop_oracle(h) for h in histories)
    scores = [3.0, 9.0, 5.0, 7.0, 7.0, 1.0, 8.0, 2.0, 6.0, 4.0, 0.5, 10.0]
    recs = [TrialRecord(i, {}, [v], status="completed") for i, v in enumerate(scores)]
    top = rank_trials(recs, 10)
    rank_ok = [r.trial_id for r in top] == [11, 1, 6, 3, 4, 8, 2, 9, 0, 7]
    mean10, _ = topk_average(top, 10, lambda r: r.best_score)
    avg_ok = mean10 == (10 + 9 + 8 + 7 + 7 + 6 + 5 + 4 + 3 + 2) / 10
    bars = random_walk_bars(30_000, seed=9)
    ds = Dataset.from_frames([AlignedFrame(b.ts, b, 3, 3) for b in bars])
    net = Mlp(MlpConfig(8, 8), 6)
    _, results = evaluate_periods(Agent("ddqn", net, net.init_params(0)), ds, "test", 256, 3000)
    windows_ok = len(results) == 256 and {r.window.length for r in results} == {3000}
    ok = split_ok and stop_ok and rank_ok and avg_ok and windows_ok
    detail = (f"split {split_ok}, early stop on {len(histories)} histories {stop_ok}, rank {rank_ok}, "
              f"top-10 mean {mean10}, {len(results)} windows")
    verdict(7, "split, early stop, ranking and 256x3000 sampling", ok, detail, time.perf_counter() - t0, 120)


# ------------------------------------------------------------------------ 8


def test_criterion_8_sentiment_pipeline(tmp_path):
    t0 = time.perf_counter()
    news = load_news(fixture_path("news.jsonl"))
    responses = FixtureResponder(fixture_path("llm_responses.jsonl")).responses
    golden = {}
    for batch in make_batches(news):
        for it, pair in zip(batch.items, parse_scores(responses[batch.prompt_hash], len(batch.items))):
            golden[it.id] = pair
    endpoint = endpoint_from_config(RunConfig())
    endpoint.offline = True
    first = FixtureResponder(endpoint.fixtures)
    score(fixture_path("news.jsonl"), tmp_path / "a.jsonl", endpoint, first)
    score(fixture_path("news.jsonl"), tmp_path / "b.jsonl", endpoint)
    second = FixtureResponder(endpoint.fixtures)
    before = (tmp_path / "a.jsonl").read_bytes()
    score(fixture_path("news.jsonl"), tmp_path / "a.jsonl", endpoint, second)
    cache = ScoreCache(tmp_path / "a.jsonl")
    got = {r.news_id: (r.sentiment, r.risk) for r in cache.records()}
    in_range = all(1 <= s <= 5 and 1 <= r <= 5 for s, r in got.values())
    ok = (got == golden and in_range and second.calls == 0 and (tmp_path / "a.jsonl").read_bytes() == before
          == (tmp_path / "b.jsonl").read_bytes())
    detail = f"{len(got)} items, {first.calls} requests then {second.calls}, scores in 1..5 {in_range}"
    verdict(8, "offline golden round-trip, score range and idempotence", ok, detail, time.perf_counter() - t0, 10)


# ------------------------------------------------------------------------ 9


def test_criterion_9_no_look_ahead(fixture_data):
    t0 = time.perf_counter()
    d, model = fixture_data
    frames = load_frames(d / "frames.csv")[:10_000]
    cache = ScoreCache(d / "scores.jsonl")
    news = [(n.ts, cache.get(n.id, model)) for n in load_news(d / "news.jsonl")]
    bad = 0
    for f in frames:
        latest = None
        for ts, rec in news:  # brute force: the last news item at or before the frame
            if ts <= f.ts and (latest is None or ts >= latest[0]):
                latest = (ts, rec)
        want = (3, 3) if latest is None else (latest[1].sentiment, latest[1].risk)
        bad += (f.sentiment, f.risk) != want
    ds = Dataset.from_frames(frames)
    crossings = checked = 0
    for tag in ("train", "validation", "test"):
        rng = ds.split[tag]
        for lookback in (1, 10, 50):
            for w in sample_windows(rng, 150, lookback, 64, seed=lookback, split_tag=tag):
                for t in range(w.start, w.stop):
                    checked += 1
                    crossings += not (rng.start <= t - lookback + 1 and t < rng.stop)
    ok = bad == 0 and crossings == 0
    detail = f"{len(frames)} frames, {bad} score mismatches, {crossings} of {checked} observations outside their split"
    verdict(9, "aligned scores never look ahead and windows stay in their split", ok, detail,
            time.perf_counter() - t0, 10)


# ----------------------------------------------------------------------- 10


def _digest(root: Path) -> dict[str, str]:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "events.jsonl"}


def test_criterion_10_selftest(tmp_path):
    out = tmp_path / "selftest"
    runs = []
    for _ in range(2):  # same directory both times: resolved_config.json records absolute paths
        if out.exists():
            shutil.rmtree(out)
        t0 = time.perf_counter()
        checks = run_selftest(out, seed=1, echo=lambda s: None)
        runs.append((checks, _digest(out), time.perf_counter() - t0))
    (checks, a, _), (_, b, _) = runs
    outputs = all((out / "report" / n).exists() for n in ("table1.csv", "table2.csv", "backtest.svg"))
    failed = [c.name for c in checks if not c.ok]
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    elapsed = max(t for *_, t in runs)
    ok = not failed and outputs and not differing
    detail = (f"{len(checks) - len(failed)}/{len(checks)} checks, {len(a)} files, "
              f"{len(differing)} differ across two runs{': ' + ', '.join(differing[:3]) if differing else ''}")
    verdict(10, "selftest end to end, deterministic per seed", ok, detail, elapsed, 900)

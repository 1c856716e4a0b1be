import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from newsrl.synthetic import drift_sine_frames
from newsrl.training import Dataset, TrainBudget
from newsrl.tuner import (Dim, SearchSpace, TrialRecord, TrialStore, check_early_stop, rank_trials, run_trial,
                          split_history, suggest, tune)

SPACES = [SearchSpace.for_run(a, n) for a in ("ddqn", "grpo") for n in ("mlp", "lstm", "transformer")]


def record(i, score, **params):
    return TrialRecord(i, params, [score], status="completed")


# ---------------------------------------------------------------- suggest


def test_empty_history_samples_inside_bounds():
    rng = np.random.default_rng(0)
    for space in SPACES:
        assert space.contains(suggest(space, [], rng))


def test_log_dimension_startup_is_log_uniform():
    space = SearchSpace((Dim("lr", "log", 2e-6, 1e-3),))
    rng = np.random.default_rng(1)
    x = np.log10([suggest(space, [], rng)["lr"] for _ in range(10_000)])
    lo, hi = math.log10(2e-6), -3.0
    assert lo == pytest.approx(-5.70, abs=5e-3)
    assert stats.kstest(x, stats.uniform(lo, hi - lo).cdf).pvalue > 1e-3


def test_categorical_prefers_the_good_choice():
    dim = Dim("batch_size", "cat", choices=(32, 128, 512))
    space = SearchSpace((dim,))
    history = [record(i, 10.0 + i, batch_size=128) for i in range(5)]
    history += [record(5 + i, float(i) - 100, batch_size=(32, 512, 128)[i % 3]) for i in range(15)]
    good, bad = split_history(history)
    assert {t.params["batch_size"] for t in good} == {128}
    # smoothed frequencies by hand: good 128 -> 6/8, bad 128 -> 6/18, bad 32 -> 6/18, bad 512 -> 6/18
    ratio = {32: (1 / 8) / (6 / 18), 128: (6 / 8) / (6 / 18), 512: (1 / 8) / (6 / 18)}
    assert max(ratio, key=ratio.get) == 128
    rng = np.random.default_rng(2)
    picks = [suggest(space, history, rng)["batch_size"] for _ in range(300)]
    counts = {c: picks.count(c) for c in dim.choices}
    assert max(counts, key=counts.get) == 128


def test_tpe_moves_toward_good_region():
    space = SearchSpace((Dim("x", "uniform", 0.0, 1.0),))
    history = [record(i, -abs(v - 0.8), x=v) for i, v in enumerate(np.linspace(0, 1, 20))]
    rng = np.random.default_rng(3)
    xs = [suggest(space, history, rng)["x"] for _ in range(200)]
    assert abs(np.median(xs) - 0.8) < 0.15


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), which=st.integers(0, len(SPACES) - 1))
def test_suggestions_always_in_bounds(seed, which):
    space = SPACES[which]
    rng = np.random.default_rng(seed)
    history = []
    for i in range(25):
        p = suggest(space, history, rng)
        assert space.contains(p)
        history.append(record(i, float(rng.normal()), **p))


def test_ten_thousand_tpe_suggestions_in_bounds():
    space = SearchSpace.for_run("grpo", "transformer")
    rng = np.random.default_rng(5)
    history = [record(i, float(rng.normal()), **suggest(space, [], rng)) for i in range(30)]
    assert all(space.contains(suggest(space, history, rng)) for _ in range(10_000 // 25))
    samples = [suggest(space, [], rng) for _ in range(10_000)]
    assert all(space.contains(p) for p in samples)


def test_dim_validation():
    with pytest.raises(ValueError):
        Dim("lr", "log", 0.0, 1.0)
    with pytest.raises(ValueError):
        Dim("c", "cat")


# ------------------------------------------------------------- early stop


def early_stop_oracle(h, patience=5):
    """Stop when the running max at the last eval is no larger than it was ``patience`` evals earlier."""
    running = [max(h[: i + 1]) for i in range(len(h))]
    return len(h) > patience and not running[-1] > running[-1 - patience]


def test_early_stop_examples():
    assert check_early_stop([3, 2, 2, 2, 2, 2])
    assert not check_early_stop([3, 2, 2, 2, 2])
    assert not check_early_stop([3, 2, 2, 2, 4])
    assert not check_early_stop([3, 2, 2, 2, 4, 1])
    assert check_early_stop([1, 1, 1, 1, 1, 1])  # equal values do not count as an increase


def test_early_stop_exhaustive_against_brute_force():
    for n in range(9):
        for values in (0, 1), (0, 1, 2):
            for h in itertools.product(values, repeat=n):
                assert check_early_stop(list(h)) == early_stop_oracle(list(h)), h


# ---------------------------------------------------------------- ranking


def test_rank_examples():
    recs = [record(0, 1.0), record(1, 9.0), record(2, 5.0)]
    assert [r.trial_id for r in rank_trials(recs, 1)] == [1]
    tie = [record(9, 7.0), record(4, 7.0), record(1, 3.0)]
    assert [r.trial_id for r in rank_trials(tie, 2)] == [4, 9]


def test_rank_top_ten_of_thirty_and_shortfall():
    rng = np.random.default_rng(0)
    recs = [record(i, float(rng.normal())) for i in range(30)]
    top = rank_trials(recs, 10)
    assert len(top) == 10
    assert [r.best_score for r in top] == sorted((r.best_score for r in recs), reverse=True)[:10]
    failed = [TrialRecord(0, {}, [1.0], status="failed")]
    with pytest.raises(ValueError):
        rank_trials(failed, 1)


def test_best_score_is_max_of_history():
    assert TrialRecord(0, {}, [5.0, 7.0, 6.0]).best_score == 7.0
    assert TrialRecord(0, {}).best_score is None


# ------------------------------------------------------------------ store


def test_store_is_append_only_and_latest_wins(tmp_path):
    store = TrialStore(tmp_path / "t.jsonl")
    store.append(TrialRecord(0, {"a": 1}, status="running"))
    store.append(TrialRecord(0, {"a": 1}, [2.0], status="completed"))
    store.append(TrialRecord(1, {"a": 2}, [1.0], status="completed"))
    before = (tmp_path / "t.jsonl").read_bytes()
    assert before.count(b"\n") == 3
    loaded = store.load()
    assert [r.status for r in loaded] == ["completed", "completed"] and store.next_id() == 2
    rank_trials(loaded, 2)
    assert (tmp_path / "t.jsonl").read_bytes() == before


# ------------------------------------------------------------------ trials

TINY = TrainBudget(episodes=4, episode_length=60, eval_interval=59, n_eval=4, eval_length=60, patience=5)


@pytest.fixture(scope="module")
def dataset():
    return Dataset.from_frames(drift_sine_frames(2000))


def test_run_trial_bookkeeping_and_determinism(dataset, tmp_path):
    space = SearchSpace.for_run("ddqn", "mlp")
    params = suggest(space, [], np.random.default_rng(0))
    a = run_trial(0, params, "ddqn", "mlp", dataset, TINY, seed=3, checkpoint_dir=tmp_path / "a")
    b = run_trial(0, params, "ddqn", "mlp", dataset, TINY, seed=3, checkpoint_dir=tmp_path / "b")
    assert a.eval_history == b.eval_history and len(a.eval_history) == 4
    assert a.status == "completed"
    assert a.best_eval_index == int(np.argmax(a.eval_history))
    assert (tmp_path / "a" / a.checkpoint_ref).exists()


def test_tune_persists_every_trial(dataset, tmp_path):
    store = TrialStore(tmp_path / "runs" / "trials.jsonl")
    out = tune(store, "grpo", "mlp", dataset, TINY, 3, seed=1, checkpoint_dir=tmp_path / "runs" / "ck")
    loaded = store.load()
    assert [r.trial_id for r in loaded] == [0, 1, 2] == [r.trial_id for r in out]
    assert all((tmp_path / "runs" / r.checkpoint_ref).exists() for r in loaded)

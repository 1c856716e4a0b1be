"""Hyperparameter search: search space, TPE-lite suggestions, early stopping and a trial store."""

from __future__ import annotations

import json
import logging
import math
import os
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .evaluation import evaluate_periods
from .training import Dataset, TrainBudget, Trainer, build_net_and_hyper

log = logging.getLogger(__name__)

N_STARTUP = 10
GAMMA = 0.25
N_CANDIDATES = 24
PATIENCE = 5


@dataclass(frozen=True)
class Dim:
    name: str
    kind: str  # "log", "uniform", "int_log", "int", "cat"
    low: float = 0.0
    high: float = 0.0
    choices: tuple = ()

    @property
    def numeric(self) -> bool:
        return self.kind != "cat"

    @property
    def is_int(self) -> bool:
        return self.kind in ("int", "int_log")

    @property
    def is_log(self) -> bool:
        return self.kind in ("log", "int_log")

    def __post_init__(self):
        if self.is_log and not (self.low > 0 and self.high > 0):
            raise ValueError(f"{self.name}: log-scale bounds must be positive")
        if self.kind == "cat" and not self.choices:
            raise ValueError(f"{self.name}: categorical dimension needs choices")

    # internal coordinates: log for log dims, widened by 0.5 for integers so rounding is uniform
    def bounds(self) -> tuple[float, float]:
        lo, hi = (self.low - 0.5, self.high + 0.5) if self.is_int else (self.low, self.high)
        if self.is_log:
            lo, hi = math.log(max(lo, 1e-300)), math.log(hi)
        return lo, hi

    def to_internal(self, value) -> float:
        return math.log(value) if self.is_log else float(value)

    def from_internal(self, x: float):
        lo, hi = self.bounds()
        x = min(max(x, lo), hi)
        v = math.exp(x) if self.is_log else x
        if self.is_int:
            return int(min(max(round(v), self.low), self.high))
        return float(min(max(v, self.low), self.high))

    def contains(self, value) -> bool:
        if self.kind == "cat":
            return value in self.choices
        if self.is_int and int(value) != value:
            return False
        return self.low <= value <= self.high


COMMON = [
    Dim("gamma", "log", 0.90, 0.995),
    Dim("grad_clip", "log", 0.1, 4.0),
    Dim("state_value_tau", "cat", choices=(0.0, 0.01)),
    Dim("lr", "log", 2e-6, 1e-3),
    Dim("weight_decay", "log", 1e-5, 1e-2),
    Dim("batch_size", "cat", choices=(32, 128, 512)),
    Dim("horizon_mult", "cat", choices=(2, 4, 8)),
]
ALGO_DIMS = {
    "ddqn": [
        Dim("repeat_times", "cat", choices=(1, 2)),
        Dim("buffer_mult", "cat", choices=(2, 4, 8)),
        Dim("epsilon_start", "log", 0.005, 0.125),
        Dim("epsilon_decay", "cat", choices=(0.99995, 0.99999, 0.999999)),
        Dim("tau", "log", 1e-3, 1e-2),
    ],
    "grpo": [
        Dim("repeat_times", "cat", choices=(4, 8)),
        Dim("gae_lambda", "uniform", 0.9, 0.99),
        Dim("clip_eps", "uniform", 0.1, 0.2),
        Dim("kl_target", "log", 0.005, 0.02),
        Dim("entropy_coef", "log", 0.001, 0.1),
        Dim("vf_coef", "log", 0.1, 1.0),
    ],
}
NET_DIMS = {
    "mlp": [Dim("mlp_h1", "cat", choices=(32, 64, 128)), Dim("mlp_h2", "cat", choices=(32, 64, 128))],
    "lstm": [
        Dim("window", "int_log", 10, 50),
        Dim("lstm_hidden", "cat", choices=(32, 64, 128)),
        Dim("lstm_layers", "cat", choices=(1, 2)),
    ],
    "transformer": [
        Dim("window", "int_log", 10, 50),
        Dim("tf_layers", "int", 1, 3),
        Dim("tf_pos_std", "log", 0.02, 1.0),
        Dim("tf_heads", "cat", choices=(2, 4)),
        Dim("tf_ff_dim", "cat", choices=(32, 64, 128)),
        Dim("tf_model_dim", "cat", choices=(32, 64, 128)),
    ],
}


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dim, ...]

    @classmethod
    def for_run(cls, algo: str, net: str) -> SearchSpace:
        return cls(tuple(COMMON + ALGO_DIMS[algo] + NET_DIMS[net]))

    def contains(self, params: dict) -> bool:
        return all(d.name in params and d.contains(params[d.name]) for d in self.dims)


@dataclass
class TrialRecord:
    trial_id: int
    params: dict
    eval_history: list[float] = field(default_factory=list)
    status: str = "running"  # running | early_stopped | completed | failed
    checkpoint_ref: str | None = None
    best_eval_index: int | None = None
    algo: str = ""
    net: str = ""
    seed: int = 0
    no_llm: bool = False
    message: str = ""

    @property
    def best_score(self) -> float | None:
        return max(self.eval_history) if self.eval_history else None

    def to_json(self) -> str:
        d = asdict(self)
        d["best_score"] = self.best_score
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> TrialRecord:
        d = json.loads(line)
        d.pop("best_score", None)
        return cls(**d)


# -------------------------------------------------------------------- suggest


def _sample_prior(d: Dim, rng: np.random.Generator):
    if d.kind == "cat":
        return d.choices[int(rng.integers(len(d.choices)))]
    lo, hi = d.bounds()
    return d.from_internal(rng.uniform(lo, hi))


def _norm_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


class _Parzen:
    """Truncated-Gaussian mixture over internal coordinates plus a uniform prior component."""

    def __init__(self, d: Dim, values: Sequence) -> None:
        self.lo, self.hi = d.bounds()
        self.mus = np.array([d.to_internal(v) for v in values], dtype=float)
        n = len(self.mus)
        self.sigma = (self.hi - self.lo) / max(1.0, n) ** 0.2 * 0.25 if n else 1.0
        mass = [_norm_cdf((self.hi - m) / self.sigma) - _norm_cdf((self.lo - m) / self.sigma) for m in self.mus]
        self.mass = np.maximum(np.array(mass, dtype=float), 1e-12)

    def pdf(self, x: float) -> float:
        n = len(self.mus)
        prior = 1.0 / (self.hi - self.lo)
        if n == 0:
            return prior
        z = (x - self.mus) / self.sigma
        k = np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi)) / self.mass
        return (prior + float(k.sum())) / (n + 1)

    def sample(self, rng: np.random.Generator) -> float:
        n = len(self.mus)
        j = int(rng.integers(n + 1))
        if j == n:
            return rng.uniform(self.lo, self.hi)
        for _ in range(100):
            x = rng.normal(self.mus[j], self.sigma)
            if self.lo <= x <= self.hi:
                return x
        return float(np.clip(self.mus[j], self.lo, self.hi))


def _cat_probs(d: Dim, values: Sequence) -> np.ndarray:
    counts = np.array([sum(1 for v in values if v == c) for c in d.choices], dtype=float)
    return (counts + 1.0) / (len(values) + len(d.choices))


def split_history(history: Sequence[TrialRecord], gamma: float = GAMMA) -> tuple[list[TrialRecord], list[TrialRecord]]:
    """Good = top ceil(gamma * n) scored trials; everything else (failed included) is bad."""
    scored = [t for t in history if t.best_score is not None and t.status != "failed"]
    scored.sort(key=lambda t: (-t.best_score, t.trial_id))
    n_good = math.ceil(gamma * len(scored)) if scored else 0
    good = scored[:n_good]
    good_ids = {t.trial_id for t in good}
    bad = [t for t in history if t.trial_id not in good_ids]
    return good, bad


def suggest(space: SearchSpace, history: Sequence[TrialRecord], rng: np.random.Generator,
            n_startup: int = N_STARTUP, gamma: float = GAMMA, n_candidates: int = N_CANDIDATES) -> dict:
    """Uniform (log-uniform) sampling for the first trials, then per-dimension TPE."""
    usable = [t for t in history if t.status != "running"]
    if len(usable) < n_startup:
        return {d.name: _sample_prior(d, rng) for d in space.dims}
    good, bad = split_history(usable, gamma)
    params = {}
    for d in space.dims:
        gv = [t.params[d.name] for t in good if d.name in t.params]
        bv = [t.params[d.name] for t in bad if d.name in t.params]
        if d.kind == "cat":
            lp, gp = _cat_probs(d, gv), _cat_probs(d, bv)
            cands = rng.choice(len(d.choices), size=n_candidates, p=lp)
            best = max(cands, key=lambda c: (lp[c] / gp[c], -c))
            params[d.name] = d.choices[int(best)]
        else:
            l_est, g_est = _Parzen(d, gv), _Parzen(d, bv)
            cands = [l_est.sample(rng) for _ in range(n_candidates)]
            best = max(cands, key=lambda x: l_est.pdf(x) / max(g_est.pdf(x), 1e-300))
            params[d.name] = d.from_internal(best)
    return params


# ---------------------------------------------------------------- early stop


def check_early_stop(eval_history: Sequence[float], patience: int = PATIENCE) -> bool:
    """True once the running maximum has not strictly increased over the last ``patience`` evaluations."""
    if len(eval_history) <= patience:
        return False
    best_at = int(np.argmax(eval_history))  # first occurrence of the maximum
    return best_at <= len(eval_history) - patience - 1


# --------------------------------------------------------------------- store


class TrialStore:
    """Append-only JSONL log of trial records; the latest line per trial_id wins."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, record: TrialRecord) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(record.to_json() + "\n")

    def load(self) -> list[TrialRecord]:
        if not self.path.exists():
            return []
        latest: dict[int, TrialRecord] = {}
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    r = TrialRecord.from_json(line)
                    latest[r.trial_id] = r
        return [latest[k] for k in sorted(latest)]

    def next_id(self) -> int:
        records = self.load()
        return records[-1].trial_id + 1 if records else 0


def rank_trials(records: Sequence[TrialRecord], k: int) -> list[TrialRecord]:
    """Top ``k`` finished trials by best_score, ties broken by the lower trial_id."""
    done = [r for r in records if r.status in ("completed", "early_stopped") and r.best_score is not None]
    if len(done) < k:
        raise ValueError(f"need {k} finished trials, have {len(done)}")
    return sorted(done, key=lambda r: (-r.best_score, r.trial_id))[:k]


# ------------------------------------------------------------------ trials


def run_trial(trial_id: int, params: dict, algo: str, net_kind: str, dataset: Dataset, budget: TrainBudget,
              seed: int, checkpoint_dir: str | Path | None = None, ref_root: str | Path | None = None) -> TrialRecord:
    """Train on training windows, evaluate on validation windows, keep the best checkpoint."""
    record = TrialRecord(trial_id, dict(params), algo=algo, net=net_kind, seed=seed, no_llm=dataset.no_llm)
    net, hyper = build_net_and_hyper(algo, net_kind, params, dataset.features.matrix.shape[1], budget.episode_length)
    trainer = Trainer(algo, net, hyper, dataset, budget, seed)
    ckpt = None
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        ckpt = Path(checkpoint_dir) / f"trial_{trial_id:04d}.json"
        record.checkpoint_ref = Path(os.path.relpath(ckpt, ref_root)).as_posix() if ref_root else ckpt.name

    def on_eval(agent) -> bool:
        score, _ = evaluate_periods(agent, dataset, "validation", budget.n_eval, budget.eval_length,
                                    budget.eval_seed, budget.sltp, budget.fee_bps)
        best = record.best_score
        record.eval_history.append(score)
        if best is None or score > best:
            record.best_eval_index = len(record.eval_history) - 1
            if ckpt is not None:
                agent.save(ckpt)
        log.info("trial %d eval %d: %.4f", trial_id, len(record.eval_history), score)
        return check_early_stop(record.eval_history, budget.patience)

    try:
        agent = trainer.run(on_eval)
        if not record.eval_history:
            on_eval(agent)
        record.status = "early_stopped" if check_early_stop(record.eval_history, budget.patience) else "completed"
    except (T.NonFiniteError, FloatingPointError) as exc:
        record.status = "failed"
        record.message = f"{type(exc).__name__}: {exc}"
        log.warning("trial %d failed: %s", trial_id, record.message)
    return record


def tune(store: TrialStore, algo: str, net_kind: str, dataset: Dataset, budget: TrainBudget, n_trials: int,
         seed: int, checkpoint_dir: str | Path) -> list[TrialRecord]:
    space = SearchSpace.for_run(algo, net_kind)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_trials):
        history = [t for t in store.load() if (t.algo, t.net, t.no_llm) == (algo, net_kind, dataset.no_llm)]
        trial_id = store.next_id()
        params = suggest(space, history, rng)
        record = run_trial(trial_id, params, algo, net_kind, dataset, budget, seed + trial_id, checkpoint_dir,
                           ref_root=store.path.parent)
        store.append(record)
        out.append(record)
    return out

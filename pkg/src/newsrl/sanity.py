"""Learning sanity experiment: can an agent learn a noise-free drift-plus-sine market?

Each agent is compared against the oracle that knows the next close and holds
the matching side every step. SL/TP is disabled so that oracle is optimal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .agents import DdqnHyper, GrpoHyper
from .data import EpisodeWindow, MarketData
from .env import Action, replay_equity
from .evaluation import evaluate_periods
from .networks import Mlp, MlpConfig
from .synthetic import drift_sine_frames
from .training import Dataset, TrainBudget, Trainer

N_FRAMES = 4000
EPISODE = 200
EPISODES = 200
TEST_WINDOWS = 16
EVAL_SEED = 7

HYPER = {
    "ddqn": DdqnHyper(gamma=0.9, epsilon_start=0.125, epsilon_decay=0.99995, tau=0.01, batch_size=32,
                      horizon_len=2 * EPISODE, replay_capacity=16 * EPISODE, repeat_times=1, lr=1e-3,
                      weight_decay=1e-5, grad_clip=4.0),
    "grpo": GrpoHyper(group_size=8, clip_eps=0.2, entropy_coef=0.001, kl_target=0.02, repeat_times=4,
                      batch_size=128, lr=1e-3, weight_decay=1e-5, grad_clip=1.0),
}


@dataclass(frozen=True)
class SanityResult:
    algo: str
    seed: int
    agent_return: float
    oracle_return: float

    @property
    def ratio(self) -> float:
        return self.agent_return / self.oracle_return


def oracle_actions(market: MarketData, window: EpisodeWindow) -> np.ndarray:
    """Long before a rise, short before a fall."""
    steps = np.diff(market.close[window.start : window.stop])
    return np.where(steps > 0, int(Action.LONG), int(Action.SHORT))


def oracle_return(market: MarketData, window: EpisodeWindow) -> float:
    final, _ = replay_equity(market, window, oracle_actions(market, window), sltp=math.inf)
    return final - float(market.close[window.start])


def sanity_dataset(n_frames: int = N_FRAMES) -> Dataset:
    return Dataset.from_frames(drift_sine_frames(n_frames))


def run_sanity(algo: str, seed: int, dataset: Dataset | None = None, episodes: int = EPISODES) -> SanityResult:
    ds = dataset or sanity_dataset()
    budget = TrainBudget(episodes=episodes, episode_length=EPISODE, eval_interval=10**12, n_eval=TEST_WINDOWS,
                         eval_length=EPISODE, sltp=math.inf)
    agent = Trainer(algo, Mlp(MlpConfig(32, 32), ds.features.matrix.shape[1]), HYPER[algo], ds, budget, seed).run()
    mean, results = evaluate_periods(agent, ds, "test", TEST_WINDOWS, EPISODE, EVAL_SEED, sltp=math.inf)
    oracle = float(np.mean([oracle_return(ds.market, r.window) for r in results]))
    return SanityResult(algo, seed, mean, oracle)

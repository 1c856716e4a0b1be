"""Train DDQN/GRPO agents on episode windows sampled from the training split."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .agents import Agent, DdqnHyper, DdqnLearner, GrpoHyper, GrpoLearner, batched_scores, hyper_to_dict
from .data import (AlignedFrame, DatasetSplit, EpisodeWindow, Features, MarketData, build_features,
                   chronological_split, sample_windows)
from .env import DEFAULT_SLTP, TradingEnv
from .networks import CONFIGS, Network, build_network

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    market: MarketData
    features: Features
    split: DatasetSplit
    no_llm: bool = False

    @classmethod
    def from_frames(cls, frames: Sequence[AlignedFrame], mode: str = "returns", no_llm: bool = False,
                    boundaries: tuple[float, float] = (0.70, 0.85)) -> Dataset:
        market = MarketData.from_frames(frames)
        split = chronological_split(frames, boundaries)
        features = build_features(market, mode, split.train)
        if no_llm:
            features = features.without_llm()
        return cls(market, features, split, no_llm)

    def obs_fn(self, lookback: int, floor: int = 0) -> Callable[[np.ndarray], np.ndarray]:
        return lambda idx: self.features.observe_many(np.asarray(idx), lookback, floor)


@dataclass
class TrainBudget:
    """Knobs that size a training run. Defaults follow the full protocol."""

    episodes: int = 200
    episode_length: int = 3000
    eval_interval: int = 30000  # environment steps between validation evaluations
    n_eval: int = 256
    eval_length: int = 3000
    patience: int = 5
    eval_seed: int = 7
    sltp: float = DEFAULT_SLTP
    fee_bps: float = 0.0

    def desk(self) -> TrainBudget:
        """Roughly 20x smaller run for laptops and CI."""
        return replace(self, episodes=max(1, self.episodes // 20), episode_length=max(2, self.episode_length // 20),
                       eval_interval=max(1, self.eval_interval // 20), n_eval=max(1, self.n_eval // 16),
                       eval_length=max(2, self.eval_length // 20))


def build_net_and_hyper(algo: str, net_kind: str, params: dict, n_features: int, episode_length: int):
    """Map a flat tuner parameter dict onto a network config and learner hyperparameters."""
    p = dict(params)
    if net_kind == "mlp":
        cfg = CONFIGS["mlp"](h1=int(p.get("mlp_h1", 64)), h2=int(p.get("mlp_h2", 64)))
    elif net_kind == "lstm":
        cfg = CONFIGS["lstm"](hidden=int(p.get("lstm_hidden", 64)), layers=int(p.get("lstm_layers", 1)),
                              window=int(p.get("window", 20)))
    elif net_kind == "transformer":
        cfg = CONFIGS["transformer"](layers=int(p.get("tf_layers", 1)), heads=int(p.get("tf_heads", 2)),
                                     model_dim=int(p.get("tf_model_dim", 32)), ff_dim=int(p.get("tf_ff_dim", 64)),
                                     pos_init_std=float(p.get("tf_pos_std", 0.1)), window=int(p.get("window", 20)))
    else:
        raise ValueError(f"unknown network {net_kind!r}")
    horizon = episode_length * int(p.get("horizon_mult", 2))
    common = {k: p[k] for k in ("gamma", "lr", "weight_decay", "grad_clip", "batch_size", "repeat_times",
                                "state_value_tau") if k in p}
    if algo == "ddqn":
        hyper = DdqnHyper(**common, horizon_len=horizon, replay_capacity=horizon * int(p.get("buffer_mult", 4)),
                          **{k: p[k] for k in ("epsilon_start", "epsilon_decay", "tau") if k in p})
    elif algo == "grpo":
        hyper = GrpoHyper(**common, horizon_len=horizon,
                          **{k: p[k] for k in ("group_size", "clip_eps", "entropy_coef", "kl_target",
                                               "gae_lambda", "vf_coef") if k in p})
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    return build_network(cfg, n_features), hyper


def greedy_window_actions(agent: Agent, features: Features, window: EpisodeWindow, floor: int) -> np.ndarray:
    states = np.arange(window.start, window.stop - 1)
    obs_fn = lambda idx: features.observe_many(idx, agent.net.window, floor)  # noqa: E731
    return np.argmax(batched_scores(agent.net, agent.params, obs_fn, states), axis=-1)


def episode_rewards(env: TradingEnv, window: EpisodeWindow, actions: np.ndarray, lookback: int) -> np.ndarray:
    env.reset(window, lookback)
    out = np.empty(len(actions))
    for i, a in enumerate(actions):
        out[i] = env.step(int(a)).reward
    return out


class Trainer:
    """Runs one learner over training windows, calling ``on_eval(agent)`` every eval interval.

    ``on_eval`` returns True to request an early stop.
    """

    def __init__(self, algo: str, net: Network, hyper, dataset: Dataset, budget: TrainBudget, seed: int = 0,
                 feature_mode: str | None = None) -> None:
        self.algo, self.net, self.hyper = algo, net, hyper
        self.dataset, self.budget, self.seed = dataset, budget, seed
        self.feature_mode = feature_mode or dataset.features.mode
        train = dataset.split.train
        self.obs_fn = dataset.obs_fn(net.window, train.start)
        if algo == "ddqn":
            self.learner = DdqnLearner(net, hyper, seed, self.obs_fn)
        else:
            self.learner = GrpoLearner(net, hyper, seed, self.obs_fn)
        self.env = TradingEnv(dataset.market, dataset.features, budget.sltp, budget.fee_bps)
        self.env.emit_observations = False
        self.windows = sample_windows(train, budget.episode_length, net.window, budget.episodes, seed, "train")
        self.env_steps = 0
        self.episode_returns: list[float] = []

    def agent(self) -> Agent:
        return Agent(self.algo, self.net, dict(self.learner.params), hyper_to_dict(self.hyper), self.feature_mode,
                     self.dataset.no_llm, self.seed)

    def run(self, on_eval: Callable[[Agent], bool] | None = None) -> Agent:
        next_eval = self.budget.eval_interval
        for window in self.windows:
            if self.algo == "ddqn":
                self._ddqn_episode(window)
            else:
                self._grpo_episode(window)
            if on_eval is not None and self.env_steps >= next_eval:
                while next_eval <= self.env_steps:
                    next_eval += self.budget.eval_interval
                if on_eval(self.agent()):
                    break
        return self.agent()

    def _ddqn_episode(self, window: EpisodeWindow) -> None:
        learner = self.learner
        env = self.env
        env.reset(window, self.net.window)
        states = np.arange(window.start, window.stop - 1)
        q = batched_scores(self.net, learner.params, self.obs_fn, states)
        total = 0.0
        for i, t in enumerate(states):
            a = learner.act(q[i])
            out = env.step(a)
            total += out.reward
            if learner.record(t, a, out.reward, t + 1, out.done) and i + 1 < len(states):
                q[i + 1 :] = batched_scores(self.net, learner.params, self.obs_fn, states[i + 1 :])
        self.env_steps += len(states)
        self.episode_returns.append(total)

    def _grpo_episode(self, window: EpisodeWindow) -> None:
        learner = self.learner
        states = np.arange(window.start, window.stop - 1)

        def episode_return(actions):
            return float(episode_rewards(self.env, window, actions, self.net.window).sum())

        group = learner.collect(states, episode_return)
        learner.update(group)
        self.env_steps += group.actions.size
        self.episode_returns.append(float(group.returns.mean()))

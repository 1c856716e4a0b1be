"""DDQN and GRPO learners, generic over any :class:`~newsrl.networks.Network`.

States handed to the replay buffer and to rollouts may be anything the
learner's ``obs_fn`` can turn into a batch of observation windows. For the
trading environment they are frame indices, because observations depend only
on market data and never on the agent's position.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .networks import Network, load_checkpoint, save_checkpoint

N_ACTIONS = 3
MICROBATCH = 64  # samples per taped forward pass; larger batches accumulate


# ----------------------------------------------------------------- hyperparams


@dataclass
class DdqnHyper:
    gamma: float = 0.99
    epsilon_start: float = 0.05
    epsilon_decay: float = 0.99999
    tau: float = 5e-3
    batch_size: int = 128
    horizon_len: int = 6000
    replay_capacity: int = 24000
    repeat_times: int = 1
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    state_value_tau: float = 0.0  # parsed, inactive


@dataclass
class GrpoHyper:
    group_size: int = 8
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    kl_target: float = 0.01
    repeat_times: int = 4
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    advantage_std_floor: float = 1e-8
    gamma: float = 0.99  # unused: group returns are undiscounted
    horizon_len: int = 6000  # parsed, inactive
    gae_lambda: float = 0.95  # parsed, inactive (no critic)
    vf_coef: float = 0.5  # parsed, inactive (no critic)
    state_value_tau: float = 0.0  # parsed, inactive


HYPER = {"ddqn": DdqnHyper, "grpo": GrpoHyper}


def hyper_from_dict(algo: str, values: dict):
    cls = HYPER[algo]
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in values.items() if k in names})


# ---------------------------------------------------------------------- agent


@dataclass
class Agent:
    """A trained policy: network, parameters and the metadata needed to reuse it."""

    algo: str
    net: Network
    params: dict[str, np.ndarray]
    hyper: dict = field(default_factory=dict)
    feature_mode: str = "returns"
    no_llm: bool = False
    seed: int = 0

    def scores(self, obs) -> np.ndarray:
        return self.net.scores(self.params, obs)

    def greedy(self, obs) -> np.ndarray:
        """Argmax action (lowest index on ties) for a batch of windows."""
        return np.argmax(self.scores(obs), axis=-1)

    def save(self, path: str | Path) -> None:
        extra = {"algo": self.algo, "hyper": self.hyper, "feature_mode": self.feature_mode,
                 "no_llm": self.no_llm, "seed": self.seed}
        save_checkpoint(path, self.net, self.params, extra)

    @classmethod
    def load(cls, path: str | Path) -> Agent:
        net, params, extra = load_checkpoint(path)
        return cls(extra["algo"], net, params, extra.get("hyper", {}), extra.get("feature_mode", "returns"),
                   extra.get("no_llm", False), extra.get("seed", 0))


def batched_scores(net: Network, params, obs_fn: Callable, states: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = []
    for i in range(0, len(states), chunk):
        out.append(net.scores(params, obs_fn(states[i : i + chunk])))
    return np.concatenate(out) if out else np.zeros((0, net.n_actions))


# --------------------------------------------------------------------- replay


class ReplayBuffer:
    """Fixed-capacity FIFO ring buffer with uniform sampling."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.size = 0
        self._next = 0
        self._states = None
        self._next_states = None
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)

    def __len__(self) -> int:
        return self.size

    def add(self, state, action: int, reward: float, next_state, done: bool) -> None:
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action {action} out of range")
        if not math.isfinite(reward):
            raise ValueError("non-finite reward")
        state = np.asarray(state)
        if self._states is None:
            self._states = np.zeros((self.capacity,) + state.shape, dtype=state.dtype)
            self._next_states = np.zeros_like(self._states)
        i = self._next
        self._states[i] = state
        self._next_states[i] = next_state
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        idx = self.sample_indices(batch_size, rng)
        return self.take(idx)

    def take(self, idx) -> dict:
        return {"state": self._states[idx], "action": self.actions[idx], "reward": self.rewards[idx],
                "next_state": self._next_states[idx], "done": self.dones[idx]}


# ----------------------------------------------------------------------- DDQN


def epsilon_greedy(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(len(q_values)))
    return int(np.argmax(q_values))


def ddqn_target(rewards, dones, q_next_online: np.ndarray, q_next_target: np.ndarray, gamma: float) -> np.ndarray:
    """r + gamma * Q_target(s', argmax_a Q_online(s', a)); just r on terminal transitions."""
    a_star = np.argmax(q_next_online, axis=-1)
    bootstrap = np.take_along_axis(q_next_target, a_star[:, None], axis=-1)[:, 0]
    return np.asarray(rewards, dtype=np.float64) + gamma * np.where(dones, 0.0, bootstrap)


def soft_update(online: dict[str, np.ndarray], target: dict[str, np.ndarray], tau: float) -> dict[str, np.ndarray]:
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    return {k: (1.0 - tau) * target[k] + tau * online[k] for k in target}


def accumulate_mean(n: int, fn: Callable[[slice], tuple[float, dict]], chunk: int = MICROBATCH):
    """Loss and gradients of a per-sample mean, evaluated in chunks to bound tape memory.

    ``fn(sl)`` returns the mean loss and its gradients over samples ``sl``.
    """
    total_loss, total = 0.0, None
    for i in range(0, n, chunk):
        sl = slice(i, min(n, i + chunk))
        loss, grads = fn(sl)
        w = (sl.stop - sl.start) / n
        total_loss += w * loss
        if total is None:
            total = {k: w * g for k, g in grads.items()}
        else:
            for k, g in grads.items():
                total[k] += w * g
    return total_loss, total


def ddqn_loss_and_grads(net: Network, params, target_params, batch: dict, gamma: float, obs_fn=None):
    obs_fn = obs_fn or (lambda s: s)
    next_obs = obs_fn(batch["next_state"])
    y = ddqn_target(batch["reward"], batch["done"], net.scores(params, next_obs),
                    net.scores(target_params, next_obs), gamma)
    obs = obs_fn(batch["state"])

    def part(sl):
        with T.Tape() as tape:
            p = tape.watch_all(params)
            q_sa = T.take_last(net.forward(p, obs[sl]), batch["action"][sl])
            loss = T.reduce_mean(T.square(q_sa - y[sl]))
        return float(loss.value), T.backward(loss, tape).of(p)

    return accumulate_mean(len(y), part)


def ddqn_update(net: Network, params, target_params, batch: dict, hyper: DdqnHyper, opt: T.AdamW, obs_fn=None):
    """One TD regression step; returns (loss, new params). Targets are constants."""
    loss, grads = ddqn_loss_and_grads(net, params, target_params, batch, hyper.gamma, obs_fn)
    if not math.isfinite(loss):
        raise T.NonFiniteError("non-finite DDQN loss")
    grads, _ = T.clip_grad_norm(grads, hyper.grad_clip)
    return loss, opt.step(params, grads)


class DdqnLearner:
    """Epsilon-greedy collection into a replay buffer, with updates every horizon."""

    def __init__(self, net: Network, hyper: DdqnHyper, seed: int = 0, obs_fn=None) -> None:
        self.net = net
        self.hyper = hyper
        self.params = net.init_params(seed)
        self.target_params = {k: v.copy() for k, v in self.params.items()}
        self.opt = T.AdamW(lr=hyper.lr, weight_decay=hyper.weight_decay)
        self.buffer = ReplayBuffer(hyper.replay_capacity)
        self.rng = np.random.default_rng(seed)
        self.epsilon = hyper.epsilon_start
        self.obs_fn = obs_fn
        self.env_steps = 0
        self.losses: list[float] = []

    def act(self, q_values: np.ndarray) -> int:
        a = epsilon_greedy(q_values, self.epsilon, self.rng)
        self.epsilon = max(0.0, self.epsilon * self.hyper.epsilon_decay)
        return a

    def record(self, state, action, reward, next_state, done) -> bool:
        """Store a transition; returns True when a horizon completed and updates ran."""
        self.buffer.add(state, action, reward, next_state, done)
        self.env_steps += 1
        if self.env_steps % self.hyper.horizon_len == 0:
            return self.train_horizon()
        return False

    def updates_per_horizon(self) -> int:
        h = self.hyper
        return max(1, int(h.horizon_len * h.repeat_times / h.batch_size))

    def train_horizon(self) -> bool:
        h = self.hyper
        if len(self.buffer) < h.batch_size:
            return False
        for _ in range(self.updates_per_horizon()):
            batch = self.buffer.sample(h.batch_size, self.rng)
            loss, self.params = ddqn_update(self.net, self.params, self.target_params, batch, h, self.opt, self.obs_fn)
            self.target_params = soft_update(self.params, self.target_params, h.tau)
            self.losses.append(loss)
        return True


# ----------------------------------------------------------------------- GRPO


@dataclass
class GroupRollout:
    """G action sequences sampled over the same states.

    ``states`` is shared by every trajectory (observations do not depend on
    actions); ``old_log_probs`` holds the acting policy's full log-distribution
    per state so KL(old || new) can be measured after each epoch.
    """

    states: np.ndarray
    actions: np.ndarray  # (G, T)
    log_prob_old: np.ndarray  # (G, T)
    old_log_probs: np.ndarray  # (T, A)
    returns: np.ndarray  # (G,)
    advantages: np.ndarray  # (G,)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def grpo_advantages(returns, std_floor: float = 1e-8) -> np.ndarray:
    """(r - mean) / max(population std, floor), one scalar per trajectory."""
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group needs at least two returns")
    return (r - r.mean()) / max(float(r.std()), std_floor)


def grpo_collect(log_probs: np.ndarray, states: np.ndarray, group_size: int, rng: np.random.Generator,
                 episode_return: Callable[[np.ndarray], float], std_floor: float = 1e-8) -> GroupRollout:
    """Sample ``group_size`` trajectories from per-state log-probabilities.

    ``episode_return`` maps one action sequence to its cumulative reward.
    """
    if group_size < 2:
        raise ValueError("group_size must be at least 2")
    probs = np.exp(log_probs)
    cum = np.cumsum(probs, axis=-1)
    u = rng.random((group_size, len(states)))
    actions = np.minimum((u[:, :, None] > cum[None, :, :]).sum(axis=-1), probs.shape[-1] - 1)
    lp = np.take_along_axis(np.broadcast_to(log_probs, (group_size,) + log_probs.shape), actions[:, :, None], axis=-1)[..., 0]
    returns = np.array([episode_return(a) for a in actions])
    return GroupRollout(states, actions, lp, log_probs, returns, grpo_advantages(returns, std_floor))


def clipped_surrogate(ratio, advantages, clip_eps: float):
    """Per-sample min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)."""
    return T.minimum(ratio * advantages, T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages)


def grpo_loss_and_grads(net: Network, params, obs, actions, log_prob_old, advantages, hyper: GrpoHyper):
    actions, log_prob_old, advantages = np.asarray(actions), np.asarray(log_prob_old), np.asarray(advantages)

    def part(sl):
        with T.Tape() as tape:
            p = tape.watch_all(params)
            logp_all = T.log_softmax(net.forward(p, obs[sl]))
            logp = T.take_last(logp_all, actions[sl])
            ratio = T.exp(logp - log_prob_old[sl])
            surrogate = T.reduce_mean(clipped_surrogate(ratio, advantages[sl], hyper.clip_eps))
            entropy = T.reduce_mean(T.reduce_sum(T.exp(logp_all) * logp_all, axis=-1)) * -1.0
            loss = surrogate * -1.0 - entropy * hyper.entropy_coef
        return float(loss.value), T.backward(loss, tape).of(p)

    return accumulate_mean(len(actions), part)


def mean_kl(old_log_probs: np.ndarray, new_log_probs: np.ndarray) -> float:
    return float(np.mean(np.sum(np.exp(old_log_probs) * (old_log_probs - new_log_probs), axis=-1)))


def grpo_update(net: Network, params, group: GroupRollout, hyper: GrpoHyper, opt: T.AdamW,
                rng: np.random.Generator, obs_fn=None):
    """Clipped-surrogate epochs over shuffled minibatches with KL early stop.

    Returns (new params, last loss, KL after the final epoch, epochs run).
    """
    obs_fn = obs_fn or (lambda s: s)
    g, n = group.actions.shape
    state_idx = np.tile(np.arange(n), g)
    actions = group.actions.reshape(-1)
    lp_old = group.log_prob_old.reshape(-1)
    adv = np.repeat(group.advantages, n)
    loss, kl, epochs = 0.0, 0.0, 0
    for _ in range(hyper.repeat_times):
        order = rng.permutation(len(actions))
        for i in range(0, len(order), hyper.batch_size):
            mb = order[i : i + hyper.batch_size]
            obs = obs_fn(group.states[state_idx[mb]])
            loss, grads = grpo_loss_and_grads(net, params, obs, actions[mb], lp_old[mb], adv[mb], hyper)
            if not math.isfinite(loss):
                raise T.NonFiniteError("non-finite GRPO loss")
            grads, _ = T.clip_grad_norm(grads, hyper.grad_clip)
            params = opt.step(params, grads)
        epochs += 1
        new_lp = log_softmax_np(batched_scores(net, params, obs_fn, group.states))
        kl = mean_kl(group.old_log_probs, new_lp)
        if kl > hyper.kl_target:
            break
    return params, loss, kl, epochs


class GrpoLearner:
    def __init__(self, net: Network, hyper: GrpoHyper, seed: int = 0, obs_fn=None) -> None:
        self.net = net
        self.hyper = hyper
        self.params = net.init_params(seed)
        self.opt = T.AdamW(lr=hyper.lr, weight_decay=hyper.weight_decay)
        self.rng = np.random.default_rng(seed)
        self.obs_fn = obs_fn or (lambda s: s)
        self.losses: list[float] = []
        self.kls: list[float] = []

    def collect(self, states: np.ndarray, episode_return: Callable[[np.ndarray], float]) -> GroupRollout:
        log_probs = log_softmax_np(batched_scores(self.net, self.params, self.obs_fn, states))
        return grpo_collect(log_probs, states, self.hyper.group_size, self.rng, episode_return,
                            self.hyper.advantage_std_floor)

    def update(self, group: GroupRollout) -> float:
        self.params, loss, kl, _ = grpo_update(self.net, self.params, group, self.hyper, self.opt, self.rng, self.obs_fn)
        self.losses.append(loss)
        self.kls.append(kl)
        return loss


def hyper_to_dict(hyper) -> dict:
    return json.loads(json.dumps(asdict(hyper)))

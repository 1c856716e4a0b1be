"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from newsrl import agents as A
from newsrl import tensor as T
from newsrl.networks import MlpConfig, Network

# ------------------------------------------------------------ chain MDP

N_STATES = 5
LEFT, RIGHT, STAY = 0, 1, 2


def chain_step(s: int, a: int) -> tuple[int, float, bool]:
    """Deterministic 5-state chain; stepping right out of the last state pays 1 and ends."""
    if a == RIGHT and s == N_STATES - 1:
        return s, 1.0, True
    nxt = {LEFT: max(0, s - 1), RIGHT: s + 1, STAY: s}[a]
    return nxt, (-0.1 if a == LEFT else 0.0), False


def value_iteration(gamma: float, tol: float = 1e-14) -> np.ndarray:
    q = np.zeros((N_STATES, 3))
    while True:
        new = np.empty_like(q)
        for s in range(N_STATES):
            for a in range(3):
                nxt, r, done = chain_step(s, a)
                new[s, a] = r + (0.0 if done else gamma * q[nxt].max())
        if np.abs(new - q).max() < tol:
            return new
        q = new


class Tabular(Network):
    """Linear read-out of a one-hot state: a lookup table of Q-values."""

    def __init__(self, n_states: int) -> None:
        super().__init__(MlpConfig(), n_states)

    @property
    def _out_dim(self) -> int:
        return self.n_features

    def _init_backbone(self, rng):
        return {}

    def _forward(self, p, x):
        return x[:, -1, :] @ p["head.w"] + p["head.b"]


def one_hot(s: int) -> np.ndarray:
    v = np.zeros((1, N_STATES))
    v[0, s] = 1.0
    return v


def train_chain_ddqn(gamma: float = 0.9, seed: int = 0, updates: int = 2000) -> np.ndarray:
    """DDQN with a uniform-random behavior policy; returns the learned Q table."""
    rng = np.random.default_rng(seed)
    hyper = A.DdqnHyper(gamma=gamma, tau=0.05, batch_size=256, lr=0.02, weight_decay=0.0, grad_clip=np.inf,
                        replay_capacity=4096)
    net = Tabular(N_STATES)
    learner = A.DdqnLearner(net, hyper, seed)
    learner.epsilon = 1.0
    s = 0
    for _ in range(4096):
        a = int(rng.integers(3))
        nxt, r, done = chain_step(s, a)
        learner.buffer.add(one_hot(s), a, r, one_hot(nxt), done)
        s = int(rng.integers(N_STATES)) if done else nxt
    opt = T.AdamW(lr=hyper.lr, weight_decay=0.0)
    params, target = learner.params, learner.target_params
    for k in range(updates):
        if k == updates // 2:
            opt.lr = hyper.lr / 10
        batch = learner.buffer.sample(hyper.batch_size, rng)
        _, params = A.ddqn_update(net, params, target, batch, hyper, opt)
        target = A.soft_update(params, target, hyper.tau)
    states = np.stack([one_hot(s) for s in range(N_STATES)])
    return net.scores(params, states)


# --------------------------------------------------------------- GRPO


def grpo_group(returns: np.ndarray, states: np.ndarray, actions: np.ndarray, log_probs: np.ndarray) -> A.GroupRollout:
    lp = np.take_along_axis(np.broadcast_to(log_probs, actions.shape + (3,)), actions[..., None], axis=-1)[..., 0]
    return A.GroupRollout(states, actions, lp, log_probs, returns, A.grpo_advantages(returns))

"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .networks import Network

DENOM_FLOOR = 1e-5


def numeric_grad(f: Callable[[dict], float], params: Mapping[str, np.ndarray], eps: float = 1e-5) -> dict:
    """Central differences of scalar ``f`` with respect to every parameter entry."""
    out = {}
    for name, value in params.items():
        flat = value.astype(np.float64).reshape(-1)
        g = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f({**params, name: flat.reshape(value.shape)})
            flat[i] = orig - eps
            down = f({**params, name: flat.reshape(value.shape)})
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
        out[name] = g.reshape(value.shape)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from amplifying round-off."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_network(net: Network, seed: int, batch: int = 2) -> float:
    """Worst relative error over all parameters for a random linear functional of the scores."""
    rng = np.random.default_rng(seed)
    params = net.init_params(seed)
    x = rng.normal(size=(batch, net.window, net.n_features))
    weights = rng.normal(size=(batch, net.n_actions))

    def f(p):
        return float((net.scores(p, x) * weights).sum())

    with T.Tape() as tape:
        watched = tape.watch_all(params)
        loss = T.reduce_sum(net.forward(watched, x) * weights)
    analytic = T.backward(loss, tape).of(watched)
    numeric = numeric_grad(f, params)
    return max(float(relative_error(analytic[k], numeric[k]).max()) for k in params)

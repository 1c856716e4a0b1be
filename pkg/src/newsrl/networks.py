"""MLP, LSTM and Transformer-encoder backbones with a 3-way action head.

Every network maps a batch of observation windows ``(B, W, F)`` (or a single
``(W, F)`` window) to per-action scores ``(B, 3)``. Parameters live in a flat
``name -> ndarray`` dict so they can be attached to a tape, optimized with
:class:`newsrl.tensor.AdamW` and checkpointed as JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T

N_ACTIONS = 3
HIDDEN_CHOICES = (32, 64, 128)


@dataclass(frozen=True)
class MlpConfig:
    h1: int = 64
    h2: int = 64

    kind = "mlp"
    window = 1


@dataclass(frozen=True)
class LstmConfig:
    hidden: int = 64
    layers: int = 1
    window: int = 20

    kind = "lstm"


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 1
    heads: int = 2
    model_dim: int = 32
    ff_dim: int = 64
    pos_init_std: float = 0.1
    window: int = 20

    kind = "transformer"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


CONFIGS = {"mlp": MlpConfig, "lstm": LstmConfig, "transformer": TransformerConfig}


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _batched(x) -> tuple[T.Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _check_window(x: T.Tensor, window: int, n_features: int, name: str) -> None:
    if x.ndim != 3 or x.shape[1] != window or x.shape[2] != n_features:
        raise T.ShapeError(f"{name}: expected window shape (B, {window}, {n_features}), got {x.shape}")


def _head(params, h) -> T.Tensor:
    return h @ params["head.w"] + params["head.b"]


class Network:
    """A backbone plus action head. Stateless: parameters are passed to ``forward``."""

    def __init__(self, config, n_features: int, n_actions: int = N_ACTIONS) -> None:
        self.config = config
        self.n_features = n_features
        self.n_actions = n_actions

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def window(self) -> int:
        return self.config.window

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params = self._init_backbone(rng)
        params["head.w"] = xavier(rng, self._out_dim, self.n_actions)
        params["head.b"] = np.zeros(self.n_actions)
        return params

    def forward(self, params, x) -> T.Tensor:
        x, single = _batched(x)
        _check_window(x, self.window, self.n_features, f"{self.kind}_forward")
        out = self._forward(params, x)
        return T.reshape(out, (self.n_actions,)) if single else out

    def scores(self, params, x) -> np.ndarray:
        """Forward without gradient tracking."""
        with T.Tape():
            return self.forward(params, np.asarray(x, dtype=np.float64)).value

    def header(self) -> dict:
        return {"kind": self.kind, "n_features": self.n_features, "n_actions": self.n_actions,
                "config": asdict(self.config)}

    @staticmethod
    def from_header(header: dict) -> Network:
        cls = NETWORKS[header["kind"]]
        config = CONFIGS[header["kind"]](**header["config"])
        return cls(config, header["n_features"], header.get("n_actions", N_ACTIONS))


class Mlp(Network):
    """Two tanh hidden layers over the most recent feature row."""

    @property
    def _out_dim(self) -> int:
        return self.config.h2

    def _init_backbone(self, rng):
        c, f = self.config, self.n_features
        return {
            "mlp.w1": xavier(rng, f, c.h1), "mlp.b1": np.zeros(c.h1),
            "mlp.w2": xavier(rng, c.h1, c.h2), "mlp.b2": np.zeros(c.h2),
        }

    def forward(self, params, x) -> T.Tensor:
        x = T.as_tensor(x)
        if x.ndim == 1:
            if x.shape[0] != self.n_features:
                raise T.ShapeError(f"mlp_forward: expected {self.n_features} features, got {x.shape[0]}")
            return T.reshape(self._forward(params, T.reshape(x, (1, 1, -1))), (self.n_actions,))
        return super().forward(params, x)

    def _forward(self, p, x):
        row = x[:, -1, :]
        h = T.tanh(row @ p["mlp.w1"] + p["mlp.b1"])
        h = T.tanh(h @ p["mlp.w2"] + p["mlp.b2"])
        return _head(p, h)


class Lstm(Network):
    """Stacked LSTM unrolled left to right; the final hidden state feeds the head."""

    @property
    def _out_dim(self) -> int:
        return self.config.hidden

    def _init_backbone(self, rng):
        c = self.config
        params = {}
        fan_in = self.n_features
        for layer in range(c.layers):
            b = np.zeros(4 * c.hidden)
            b[c.hidden : 2 * c.hidden] = 1.0  # forget gate
            params[f"lstm{layer}.wx"] = xavier(rng, fan_in, 4 * c.hidden)
            params[f"lstm{layer}.wh"] = xavier(rng, c.hidden, 4 * c.hidden)
            params[f"lstm{layer}.b"] = b
            fan_in = c.hidden
        return params

    def _forward(self, p, x):
        c = self.config
        hs = c.hidden
        batch, window = x.shape[0], x.shape[1]
        seq = [x[:, t, :] for t in range(window)]
        for layer in range(c.layers):
            wx, wh, b = p[f"lstm{layer}.wx"], p[f"lstm{layer}.wh"], p[f"lstm{layer}.b"]
            h = T.Tensor(np.zeros((batch, hs)))
            cell = T.Tensor(np.zeros((batch, hs)))
            out = []
            for t in range(window):
                gates = seq[t] @ wx + h @ wh + b
                i = T.sigmoid(gates[:, :hs])
                f = T.sigmoid(gates[:, hs : 2 * hs])
                g = T.tanh(gates[:, 2 * hs : 3 * hs])
                o = T.sigmoid(gates[:, 3 * hs :])
                cell = f * cell + i * g
                h = o * T.tanh(cell)
                out.append(h)
            seq = out
        return _head(p, seq[-1])


class Transformer(Network):
    """Pre-norm encoder with learnable positional encodings; reads out the last position."""

    @property
    def _out_dim(self) -> int:
        return self.config.model_dim

    def _init_backbone(self, rng):
        c = self.config
        d = c.model_dim
        params = {
            "tf.proj.w": xavier(rng, self.n_features, d),
            "tf.proj.b": np.zeros(d),
            "tf.pos": rng.normal(0.0, c.pos_init_std, size=(c.window, d)),
        }
        for layer in range(c.layers):
            pre = f"tf{layer}."
            params[pre + "ln1.g"] = np.ones(d)
            params[pre + "ln1.b"] = np.zeros(d)
            for name in ("q", "k", "v", "o"):
                params[pre + f"attn.w{name}"] = xavier(rng, d, d)
                params[pre + f"attn.b{name}"] = np.zeros(d)
            params[pre + "ln2.g"] = np.ones(d)
            params[pre + "ln2.b"] = np.zeros(d)
            params[pre + "ff.w1"] = xavier(rng, d, c.ff_dim)
            params[pre + "ff.b1"] = np.zeros(c.ff_dim)
            params[pre + "ff.w2"] = xavier(rng, c.ff_dim, d)
            params[pre + "ff.b2"] = np.zeros(d)
        return params

    def attention(self, p, pre: str, x) -> tuple[T.Tensor, T.Tensor]:
        """Multi-head self-attention over all positions; returns (output, weights)."""
        c = self.config
        batch, window, d = x.shape
        heads, hd = c.heads, c.head_dim

        def split(t):
            return T.transpose(T.reshape(t, (batch, window, heads, hd)), (0, 2, 1, 3))

        q = split(x @ p[pre + "attn.wq"] + p[pre + "attn.bq"])
        k = split(x @ p[pre + "attn.wk"] + p[pre + "attn.bk"])
        v = split(x @ p[pre + "attn.wv"] + p[pre + "attn.bv"])
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
        weights = T.softmax(scores)
        ctx = T.reshape(T.transpose(weights @ v, (0, 2, 1, 3)), (batch, window, d))
        return ctx @ p[pre + "attn.wo"] + p[pre + "attn.bo"], weights

    def _forward(self, p, x):
        c = self.config
        h = x @ p["tf.proj.w"] + p["tf.proj.b"] + p["tf.pos"]
        for layer in range(c.layers):
            pre = f"tf{layer}."
            attn, _ = self.attention(p, pre, T.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"]))
            h = h + attn
            z = T.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            z = T.gelu(z @ p[pre + "ff.w1"] + p[pre + "ff.b1"]) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
            h = h + z
        return _head(p, h[:, -1, :])


NETWORKS = {"mlp": Mlp, "lstm": Lstm, "transformer": Transformer}


def build_network(config, n_features: int) -> Network:
    return NETWORKS[config.kind](config, n_features)


def save_checkpoint(path: str | Path, net: Network, params: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """JSON file: architecture header, optional metadata, and the parameter map."""
    doc = {"format": "newsrl-params/1", "network": net.header(), "extra": extra or {},
           "params": T.params_to_json(params)}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[Network, dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    return Network.from_header(doc["network"]), T.params_from_json(doc["params"]), doc.get("extra", {})

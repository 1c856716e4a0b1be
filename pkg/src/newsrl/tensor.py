"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every operation whose inputs are attached to it. Values
that are not attached (plain arrays, detached tensors) are constants, so the
same forward code runs with or without gradient tracking::

    with Tape() as tape:
        w = tape.watch(np.array([3.0]))
        loss = (w * w).sum()
    grads = backward(loss, tape)
    grads[w.node_id]  # array([6.])
"""

from __future__ import annotations

import json
import math
import threading
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LAYER_NORM_EPS = 1e-5

_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None


class Tape:
    """Append-only record of operations. Use as a context manager to activate."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> Tape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        """Register a leaf (typically a parameter) and return it attached to this tape."""
        arr = np.array(value, dtype=np.float64)
        node_id = self._append(Node("leaf", (), arr.shape, None))
        return Tensor(arr, node_id=node_id, tape=self)

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.watch(v) for name, v in params.items()}

    def _append(self, node: Node) -> int:
        for i in node.inputs:
            if i >= len(self.nodes):
                raise RuntimeError(f"node input {i} does not precede node {len(self.nodes)}")
        self.nodes.append(node)
        return len(self.nodes) - 1


class Tensor:
    """Dense float64 array optionally linked to a tape node."""

    __slots__ = ("value", "node_id", "tape")
    __array_priority__ = 100

    def __init__(self, value, node_id: int | None = None, tape: Tape | None = None) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat view of the data."""
        return self.value.reshape(-1)

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"

    __add__ = lambda a, b: add(a, b)  # noqa: E731
    __radd__ = lambda a, b: add(b, a)  # noqa: E731
    __sub__ = lambda a, b: sub(a, b)  # noqa: E731
    __rsub__ = lambda a, b: sub(b, a)  # noqa: E731
    __mul__ = lambda a, b: mul(a, b)  # noqa: E731
    __rmul__ = lambda a, b: mul(b, a)  # noqa: E731
    __truediv__ = lambda a, b: div(a, b)  # noqa: E731
    __rtruediv__ = lambda a, b: div(b, a)  # noqa: E731
    __matmul__ = lambda a, b: matmul(a, b)  # noqa: E731
    __rmatmul__ = lambda a, b: matmul(b, a)  # noqa: E731
    __neg__ = lambda a: mul(a, -1.0)  # noqa: E731

    def __getitem__(self, idx) -> Tensor:
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kind: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{kind} produced non-finite values")


def _record(kind: str, value: np.ndarray, inputs: Iterable[Tensor], backward) -> Tensor:
    _check_finite(kind, value)
    tape = _active_tape()
    if tape is None:
        return Tensor(value)
    ids = []
    grad_fns = []
    for inp, g in zip(inputs, backward):
        if inp.node_id is not None and inp.tape is tape:
            ids.append(inp.node_id)
            grad_fns.append(g)
    if not ids:
        return Tensor(value)

    def node_backward(grad_out):
        return tuple(g(grad_out) for g in grad_fns)

    node_id = tape._append(Node(kind, tuple(ids), value.shape, node_backward))
    return Tensor(value, node_id=node_id, tape=tape)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record(
        "add",
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record(
        "sub",
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _record(
        "mul",
        av * bv,
        (a, b),
        (lambda g: _unbroadcast(g * bv, a.shape), lambda g: _unbroadcast(g * av, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = av / bv
    return _record(
        "div",
        out,
        (a, b),
        (lambda g: _unbroadcast(g / bv, a.shape), lambda g: _unbroadcast(-g * out / bv, b.shape)),
    )


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; 1-d operands are not promoted."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    av, bv = a.value, b.value
    return _record(
        "matmul",
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape),
            lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape),
        ),
    )


def concat(tensors: list, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def part(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return _record("concat", out, ts, tuple(part(i) for i in range(len(ts))))


def concat_last_dim(a, b) -> Tensor:
    return concat([a, b], axis=-1)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    take_a = a.value <= b.value
    return _record(
        "minimum",
        np.where(take_a, a.value, b.value),
        (a, b),
        (
            lambda g: _unbroadcast(np.where(take_a, g, 0.0), a.shape),
            lambda g: _unbroadcast(np.where(take_a, 0.0, g), b.shape),
        ),
    )


FORWARD_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "concat_last_dim": concat_last_dim,
}


def forward_primitive(kind: str, a, b) -> Tensor:
    try:
        op = FORWARD_PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return op(a, b)


# ----------------------------------------------------------------- unary ops


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _record("tanh", out, (a,), (lambda g: g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))  # overflow-free form
    return _record("sigmoid", out, (a,), (lambda g: g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _record("relu", np.where(mask, a.value, 0.0), (a,), (lambda g: np.where(mask, g, 0.0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    return _record("gelu", out, (a,), (grad,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
        out = np.exp(a.value)
    return _record("exp", out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise ValueError("log of non-positive value")
    x = a.value
    return _record("log", np.log(x), (a,), (lambda g: g / x,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return _record("square", x * x, (a,), (lambda g: 2.0 * g * x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise ValueError("sqrt of non-positive value")
    out = np.sqrt(a.value)
    return _record("sqrt", out, (a,), (lambda g: 0.5 * g / out,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _record("clip", np.clip(a.value, lo, hi), (a,), (lambda g: np.where(inside, g, 0.0),))


def softmax(a) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    a = as_tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return out * (g - (g * out).sum(axis=-1, keepdims=True))

    return _record("softmax", out, (a,), (grad,))


softmax_last_dim = softmax


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def grad(g):
        return g - p * g.sum(axis=-1, keepdims=True)

    return _record("log_softmax", out, (a,), (grad,))


def layer_norm(a, gain=None, bias=None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply optional gain and bias."""
    a = as_tensor(a)
    n = a.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and as_tensor(p).shape != (n,):
            raise ShapeError(f"layer_norm: {name} shape {as_tensor(p).shape} != ({n},)")
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def grad(g):
        return inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))

    out = _record("layer_norm", xhat, (a,), (grad,))
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


FORWARD_UNARY = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax_last_dim": softmax,
    "log": log,
}


def forward_unary(kind: str, a, gain=None, bias=None) -> Tensor:
    if kind == "layer_norm":
        if gain is None or bias is None:
            raise ValueError("layer_norm requires gain and bias")
        return layer_norm(a, gain, bias)
    try:
        op = FORWARD_UNARY[kind]
    except KeyError:
        raise ValueError(f"unknown unary op {kind!r}") from None
    return op(a)


# ------------------------------------------------------------ shape and reduce


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _record("sum", a.value.sum(axis=axis, keepdims=keepdims), (a,), (grad,))


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _record("reshape", out, (a,), (lambda g: g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _record("transpose", np.transpose(a.value, axes), (a,), (lambda g: np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

    def grad(g):
        out = np.zeros(shape)
        if basic:  # basic indexing never repeats an element
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return out

    return _record("getitem", np.array(a.value[idx]), (a,), (grad,))


def take_last(a, index: np.ndarray) -> Tensor:
    """Pick ``a[..., index[...]]`` along the last axis; ``index`` has a's leading shape."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    out = np.take_along_axis(a.value, index[..., None], axis=-1)[..., 0]
    shape = a.shape

    def grad(g):
        full = np.zeros(shape)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return full

    return _record("take_last", out, (a,), (grad,))


# ------------------------------------------------------------------- backward


class Gradients(Mapping):
    """node_id -> gradient array; nodes off every path to the loss map to zeros."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]) -> None:
        self._tape = tape
        self._grads = grads

    def __getitem__(self, node_id: int) -> np.ndarray:
        if not 0 <= node_id < len(self._tape.nodes):
            raise KeyError(node_id)
        g = self._grads.get(node_id)
        return g if g is not None else np.zeros(self._tape.nodes[node_id].shape)

    def __iter__(self):
        return iter(range(len(self._tape.nodes)))

    def __len__(self) -> int:
        return len(self._tape.nodes)

    def of(self, tensors: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        return {name: self[t.node_id] for name, t in tensors.items()}


def backward(loss: Tensor, tape: Tape) -> Gradients:
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node_id is None or loss.tape is not tape:
        raise ValueError("backward: loss is not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    nodes = tape.nodes
    for i in range(loss.node_id, -1, -1):
        g = grads.get(i)
        node = nodes[i]
        if g is None or node.backward is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    return Gradients(tape, grads)


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def for_param(cls, param: np.ndarray, **kw) -> AdamWState:
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), **kw)


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState) -> np.ndarray:
    """Return the updated parameter; ``state`` is advanced in place."""
    if param.shape != grad.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise ShapeError(f"adamw_step: shapes param {param.shape}, grad {grad.shape}, m {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("adamw_step: non-finite gradient")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon) - state.lr * state.weight_decay * param


@dataclass
class AdamW:
    """Per-parameter AdamW states over a name -> array parameter dict."""

    lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    states: dict[str, AdamWState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"adamw: non-finite gradient for {name}")
        out = dict(params)
        for name, g in grads.items():
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = AdamWState.for_param(
                    params[name], lr=self.lr, weight_decay=self.weight_decay,
                    beta1=self.betas[0], beta2=self.betas[1], epsilon=self.epsilon,
                )
            out[name] = adamw_step(params[name], g, st)
        return out


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grad_norm(grads, max_norm: float):
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Accepts a list or a name -> array dict; returns the same container type and
    the norm measured before clipping.
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    items = list(grads.values()) if isinstance(grads, Mapping) else list(grads)
    norm = global_norm(items)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    if isinstance(grads, Mapping):
        return {k: g * scale for k, g in grads.items()}, norm
    return [g * scale for g in items], norm


# ---------------------------------------------------------------- checkpoints


def params_to_json(params: Mapping[str, np.ndarray]) -> dict:
    return {
        name: {"shape": list(v.shape), "values": [float(x) for x in np.asarray(v, dtype=np.float64).reshape(-1)]}
        for name, v in sorted(params.items())
    }


def params_from_json(obj: Mapping) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in obj.items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if int(np.prod(shape)) != values.size:
            raise ShapeError(f"checkpoint entry {name}: shape {shape} does not match {values.size} values")
        out[name] = values.reshape(shape)
    return out


def save_params(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_text(json.dumps(params_to_json(params)))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    return params_from_json(json.loads(Path(path).read_text()))

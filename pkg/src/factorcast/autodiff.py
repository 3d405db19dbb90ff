"""Minimal reverse-mode automatic differentiation over float64 numpy tensors.

Covers exactly the primitives the forecasting networks need: affine ops,
an LSTM cell, elementwise nonlinearities, reductions, concatenation,
dropout, detach, plus an Adam optimizer, a finite-difference gradient
checker and a portable checkpoint format.

Graphs are dynamic tapes: entering a ``Graph`` context records every op
in creation order (which is a valid topological order), ``backward``
walks the tape in reverse. With no active graph, ops evaluate eagerly
without recording, which doubles as the fast inference path.
"""

from __future__ import annotations

import json
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class AutodiffError(Exception):
    """Base class for graph construction/backward errors."""


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


class DomainError(AutodiffError):
    pass


class GraphError(AutodiffError):
    pass


class Tensor:
    """A value node in the computation graph.

    ``value`` is always a float64 ndarray; ``parents``/``bwd`` are set only
    for op outputs recorded on an active graph. ``grad`` is populated
    transiently during ``Graph.backward``.
    """

    __slots__ = ("value", "parents", "bwd", "grad", "name")

    def __init__(self, value, name: str | None = None):
        v = np.asarray(value, dtype=np.float64)
        self.value = v
        self.parents: tuple = ()
        self.bwd = None
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise GraphError(f"item() on non-scalar tensor of shape {self.value.shape}")
        return float(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"

    # Operator sugar; constants are accepted on either side.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAPH_STACK: list["Graph"] = []


class Graph:
    """Tape of ops plus a registry of named trainable parameters.

    ``nodes`` records op outputs in creation order; backward walks it in
    reverse, so the order is consistent with data dependencies by
    construction. Every registered parameter receives an entry in the
    gradient store, zero-filled when the loss does not reach it.
    """

    def __init__(self, params: Mapping[str, Tensor] | None = None):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = dict(params) if params else {}
        self.grads: dict[str, np.ndarray] = {}

    def register(self, name: str, tensor: Tensor) -> None:
        self.params[name] = tensor

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Reverse-accumulate gradients of a scalar loss into the store."""
        if loss.value.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        try:
            for node in reversed(self.nodes):
                if node.grad is None or node.bwd is None:
                    continue
                node.bwd(node.grad)
            self.grads = {}
            for name, p in self.params.items():
                if p.grad is None:
                    self.grads[name] = np.zeros_like(p.value)
                else:
                    self.grads[name] = p.grad
        finally:
            # Parameters and constant leaves persist across graphs; never
            # leak stale gradients into a later backward pass.
            for node in self.nodes:
                node.grad = None
                for parent in node.parents:
                    parent.grad = None
            for p in self.params.values():
                p.grad = None
            loss.grad = None
        return self.grads


def active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _make(value: np.ndarray, parents: tuple, bwd) -> Tensor:
    out = Tensor(value)
    g = active_graph()
    if g is not None:
        out.parents = parents
        out.bwd = bwd
        g.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value + b.value
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return _make(value, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value - b.value
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return _make(value, (a, b), bwd)


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a python scalar or ndarray."""
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)
        value = a.value * s

        def bwd(g):
            _accum(a, g * s)

        return _make(value, (a,), bwd)
    b = as_tensor(b)
    try:
        value = a.value * b.value
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def bwd(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(value, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    value = a.value @ b.value

    def bwd(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _make(value, (a, b), bwd)


def _unary(name: str, a, fn, dfn) -> Tensor:
    a = as_tensor(a)
    value = fn(a.value)

    def bwd(g):
        _accum(a, g * dfn(a.value, value))

    return _make(value, (a,), bwd)


def sigmoid(a) -> Tensor:
    def fn(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary("sigmoid", a, fn, lambda x, y: y * (1.0 - y))


def tanh(a) -> Tensor:
    return _unary("tanh", a, np.tanh, lambda x, y: 1.0 - y * y)


def relu(a) -> Tensor:
    return _unary("relu", a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log: non-positive input")
    return _unary("log", a, np.log, lambda x, y: 1.0 / x)


def square(a) -> Tensor:
    return _unary("square", a, np.square, lambda x, y: 2.0 * x)


def absolute(a) -> Tensor:
    # Subgradient 0 at exactly 0 (measure-zero for the weight chains).
    return _unary("abs", a, np.abs, lambda x, y: np.sign(x))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero where clamping is active."""
    a = as_tensor(a)
    value = np.clip(a.value, lo, hi)

    def bwd(g):
        _accum(a, g * ((a.value >= lo) & (a.value <= hi)).astype(np.float64))

    return _make(value, (a,), bwd)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat", ())
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[p.shape for p in parts]) from None
    ax = axis if axis >= 0 else value.ndim + axis
    sizes = [p.value.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(s, e)
            _accum(p, g[tuple(idx)])

    return _make(value, tuple(parts), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    ax = axis if axis >= 0 else a.value.ndim + axis
    if start < 0 or start + length > a.value.shape[ax]:
        raise ShapeError("narrow", a.shape, (start, length))
    idx = [slice(None)] * a.value.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)
    value = a.value[idx]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.value)
        a.grad[idx] += g

    return _make(value, (a,), bwd)


def take_rows(a, indices) -> Tensor:
    """Select rows of a 2-d tensor by integer index."""
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError("take_rows", a.shape)
    idx = np.asarray(indices, dtype=np.intp)
    value = a.value[idx]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.value)
        np.add.at(a.grad, idx, g)

    return _make(value, (a,), bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError("transpose", a.shape)
    value = a.value.T

    def bwd(g):
        _accum(a, g.T)

    return _make(value, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None

    def bwd(g):
        _accum(a, g.reshape(a.value.shape))

    return _make(value, (a,), bwd)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    value = a.value.sum(axis=axis)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.value.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy())

    return _make(np.asarray(value), (a,), bwd)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    if n == 0:
        raise DomainError("mean: empty input")
    return mul(tsum(a, axis=axis), 1.0 / n)


def dropout(a, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in evaluation mode."""
    a = as_tensor(a)
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout: rate {rate} outside [0, 1)")
    if rng is None:
        raise DomainError("dropout: training mode requires an rng")
    mask = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    value = a.value * mask

    def bwd(g):
        _accum(a, g * mask)

    return _make(value, (a,), bwd)


def detach(a) -> Tensor:
    """Equal-valued leaf; gradient flow stops here."""
    a = as_tensor(a)
    return Tensor(a.value.copy())


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

LSTM_GATES = ("i", "f", "g", "o")


def init_lstm(rng: np.random.Generator, in_dim: int, hidden: int) -> dict[str, Tensor]:
    """Four gate input matrices, four recurrent matrices, four biases."""
    k = 1.0 / math.sqrt(hidden)
    p = {}
    for gate in LSTM_GATES:
        p[f"W_{gate}"] = Tensor(rng.uniform(-k, k, size=(in_dim, hidden)))
        p[f"R_{gate}"] = Tensor(rng.uniform(-k, k, size=(hidden, hidden)))
        p[f"b_{gate}"] = Tensor(rng.uniform(-k, k, size=(hidden,)))
    return p


def fuse_lstm(weights: Mapping[str, Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Concatenate the per-gate matrices once per forward pass.

    The parameters remain the four separate matrices; fusing just cuts the
    per-timestep op count (two matmuls instead of eight).
    """
    W = concat([weights[f"W_{g}"] for g in LSTM_GATES], axis=1)
    R = concat([weights[f"R_{g}"] for g in LSTM_GATES], axis=1)
    b = concat([weights[f"b_{g}"] for g in LSTM_GATES], axis=0)
    return W, R, b


def lstm_step(fused, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    W, R, b = fused
    hidden = h.value.shape[-1]
    if x.value.shape[-1] != W.value.shape[0]:
        raise ShapeError("lstm_cell", x.shape, W.shape)
    z = add(add(matmul(x, W), matmul(h, R)), b)
    i = sigmoid(narrow(z, -1, 0, hidden))
    f = sigmoid(narrow(z, -1, hidden, hidden))
    g = tanh(narrow(z, -1, 2 * hidden, hidden))
    o = sigmoid(narrow(z, -1, 3 * hidden, hidden))
    c2 = add(mul(f, c), mul(i, g))
    h2 = mul(o, tanh(c2))
    return h2, c2


def lstm_cell(x, h, c, weights: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Standard LSTM update: i,f,o sigmoid gates, g tanh gate."""
    return lstm_step(fuse_lstm(weights), as_tensor(x), as_tensor(h), as_tensor(c))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.value.shape:
                raise ShapeError("adam_step", g.shape, p.value.shape)
            if not np.all(np.isfinite(g)):
                raise GraphError(f"adam_step: non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.value -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm cap; returns the raw norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def gradient_check(func: Callable[[], Tensor], params: Mapping[str, Tensor],
                   eps: float = 1e-5, max_coords: int = 24,
                   seed: int = 0, atol: float = 0.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``func`` must rebuild the scalar loss from the current parameter values on
    every call. Coordinates are subsampled per parameter when tensors are
    large; the relative error denominator is max(|analytic|, |numeric|, 1e-12).

    ``atol`` skips coordinates whose absolute disagreement is below it:
    central differences carry an ~1e-9 noise floor at float64, which the
    relative formula would otherwise amplify on structurally-zero gradients
    (e.g. a shift-invariant loss differentiated in a bias).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    with Graph(params) as g:
        loss = func()
        if not np.all(np.isfinite(loss.value)):
            raise DomainError("gradient_check: non-finite loss")
        analytic = g.backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        n = p.value.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        flat = p.value.reshape(-1)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            up = func().item()
            flat[j] = orig - eps
            down = func().item()
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise DomainError(f"gradient_check: non-finite evaluation at {name}[{j}]")
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[j])
            diff = abs(a - numeric)
            if diff <= atol:
                continue
            worst = max(worst, diff / max(abs(a), abs(numeric), 1e-12))
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_params(path, params: Mapping[str, Tensor], metadata: dict | None = None) -> None:
    """Write an ordered name -> {shape, flat values} map as versioned JSON."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "metadata": metadata or {},
        "params": {
            name: {"shape": list(p.value.shape), "values": p.value.reshape(-1).tolist()}
            for name, p in params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_params(path) -> tuple[dict[str, Tensor], dict]:
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    params = {}
    for name, rec in payload["params"].items():
        arr = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        params[name] = Tensor(arr)
    return params, payload.get("metadata", {})


def param_values(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.value.copy() for k, p in params.items()}


def set_param_values(params: Mapping[str, Tensor], values: Mapping[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.value[...] = values[k]

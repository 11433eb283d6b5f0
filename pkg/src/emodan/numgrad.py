"""Minimal reverse-mode differentiation over float64 numpy arrays.

Only the layers the cascade network needs are provided: ``dense``,
``conv2d`` (3x3, stride 1, zero padding 1), ``maxpool2``, ``relu``,
``softmax_ce``, plus the small amount of glue the model uses (addition,
scaling, reshaping, per-sample point transforms and the normalized landmark
error). Every op records its parents and a closure mapping the output
gradient to input gradients; ``backward`` walks the recorded graph in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step rejected")
        self.name = name


class Tensor:
    """An n-d float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    # glue arithmetic used by the model and loss
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _result(values: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.name = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None  # allocated when a gradient first arrives
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph


@dataclass
class Graph:
    """Executed ops reachable from a root, in topological order (inputs first)."""

    nodes: list[Tensor]

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def ops(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is not None]


def backward(root: Tensor, grad: np.ndarray | None = None) -> Graph:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable tensor.

    Returns the traced graph; each op is visited once, in reverse order.
    """
    if not root.requires_grad:
        raise ValueError("backward() on a tensor that does not require grad")
    if grad is None:
        if root.values.size != 1:
            raise ShapeError(f"backward() needs an explicit gradient for shape {root.shape}")
        grad = np.ones_like(root.values)
    graph = Graph.trace(root)
    root.grad = grad if root.grad is None else root.grad + grad
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            # never in place: ops may hand the same array to several parents
            parent.grad = g if parent.grad is None else parent.grad + g
    return graph


# ---------------------------------------------------------------------------
# routing freeze


class _Routing:
    """Relu masks and maxpool winners, recorded once and optionally replayed.

    Replaying pins every piecewise-linear choice to the recorded one, which
    turns the network into a smooth function on the recorded linear region.
    Finite differences of that function are free of kink crossings.
    """

    def __init__(self):
        self.log: list[np.ndarray] | None = None
        self.replay: list[np.ndarray] | None = None
        self.pos = 0

    def next(self, shape: tuple[int, ...]) -> np.ndarray | None:
        if self.replay is None:
            return None
        if self.pos >= len(self.replay) or self.replay[self.pos].shape != shape:
            raise ShapeError("routing replay does not match the recorded graph")
        out = self.replay[self.pos]
        self.pos += 1
        return out

    def record(self, choice: np.ndarray) -> None:
        if self.log is not None:
            self.log.append(choice)


_routing = _Routing()


@contextlib.contextmanager
def record_routing() -> Iterator[list[np.ndarray]]:
    log: list[np.ndarray] = []
    prev = _routing.log
    _routing.log = log
    try:
        yield log
    finally:
        _routing.log = prev


@contextlib.contextmanager
def frozen_routing(log: list[np.ndarray]) -> Iterator[None]:
    """Replay ``log`` in order; enter once per forward pass."""
    prev = (_routing.replay, _routing.pos)
    _routing.replay, _routing.pos = log, 0
    try:
        yield
    finally:
        _routing.replay, _routing.pos = prev


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.values.ndim != 2 or w.values.ndim != 2 or b.values.ndim != 1:
        raise ShapeError(f"dense expects x[B,I], w[I,O], b[O]; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"dense shape mismatch: x{x.shape} @ w{w.shape} + b{b.shape}")
    xv, wv = x.values, w.values
    out = xv @ wv + b.values

    def back(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _result(out, (x, w, b), back, "dense")


def conv2d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.values.ndim != 4 or k.values.ndim != 4:
        raise ShapeError(f"conv2d expects x[B,C,H,W] and k[F,C,3,3]; got {x.shape}, {k.shape}")
    if k.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d supports 3x3 kernels only; got {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    if b.shape != (k.shape[0],):
        raise ShapeError(f"conv2d bias {b.shape} does not match {k.shape[0]} filters")
    xv, kv = x.values, k.values
    out = kernels.conv3x3_forward(xv, kv, b.values)

    def back(g):
        return kernels.conv3x3_backward(xv, kv, g, need_gx=x.requires_grad)

    return _result(out, (x, k, b), back, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    if x.values.ndim != 4:
        raise ShapeError(f"maxpool2 expects x[B,C,H,W]; got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2 needs even spatial size; got {x.shape}")
    replayed = _routing.next((x.shape[0], x.shape[1], x.shape[2] // 2, x.shape[3] // 2))
    if replayed is None:
        out, arg = kernels.maxpool2_forward(x.values)
        _routing.record(arg)
    else:
        arg = replayed
        B, C, H, W = x.shape
        win = x.values.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
        out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]

    def back(g):
        return (kernels.maxpool2_backward(g, arg),)

    return _result(out, (x,), back, "maxpool2")


def relu(x: Tensor) -> Tensor:
    mask = _routing.next(x.shape)
    if mask is None:
        mask = x.values > 0
        _routing.record(mask)
    out = np.where(mask, x.values, 0.0)

    def back(g):
        return (np.where(mask, g, 0.0),)

    return _result(out, (x,), back, "relu")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.values.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"softmax_ce expects logits[B,K] and B labels; got {logits.shape}, {labels.shape}")
    B, K = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}); got {labels.tolist()}")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = np.mean(logsum - z[rows, labels])
    p = np.exp(z - logsum[:, None])

    def back(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g / B),)

    return _result(np.array(loss), (logits,), back, "softmax_ce")


# ---------------------------------------------------------------------------
# glue


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        try:
            np.broadcast_shapes(x.shape, y.shape)
        except ValueError as exc:
            raise ShapeError(f"cannot add {x.shape} and {y.shape}") from exc
    out = x.values + y.values
    xs, ys = x.shape, y.shape

    def back(g):
        return _unbroadcast(g, xs), _unbroadcast(g, ys)

    return _result(out, (x, y), back, "add")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        return (g * c,)

    return _result(x.values * c, (x,), back, "scale")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def back(g):
        return (g.reshape(src),)

    return _result(x.values.reshape(shape), (x,), back, "reshape")


def transform_points(p: Tensor, params: np.ndarray) -> Tensor:
    """Apply a per-sample similarity map to p[B,N,2].

    ``params`` rows are (a, b, tx, ty) and are treated as constants.
    """
    params = np.asarray(params, dtype=np.float64)
    if p.values.ndim != 3 or p.shape[2] != 2 or params.shape != (p.shape[0], 4):
        raise ShapeError(f"transform_points expects p[B,N,2], params[B,4]; got {p.shape}, {params.shape}")
    a, b, tx, ty = (params[:, i, None] for i in range(4))
    px, py = p.values[..., 0], p.values[..., 1]
    out = np.stack([a * px - b * py + tx, b * px + a * py + ty], axis=-1)

    def back(g):
        gx, gy = g[..., 0], g[..., 1]
        return (np.stack([a * gx + b * gy, -b * gx + a * gy], axis=-1),)

    return _result(out, (p,), back, "transform_points")


def landmark_nme(pred: Tensor, gt: np.ndarray, norm: np.ndarray) -> Tensor:
    """Batch mean of (mean point-to-point distance) / norm, with ``norm`` constant."""
    gt = np.asarray(gt, dtype=np.float64)
    norm = np.asarray(norm, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape or pred.values.ndim != 3 or norm.shape != (pred.shape[0],):
        raise ShapeError(f"landmark_nme: pred {pred.shape}, gt {gt.shape}, norm {norm.shape}")
    B, N, _ = pred.shape
    diff = pred.values - gt
    dist = np.sqrt((diff * diff).sum(axis=-1))
    loss = np.mean(dist.mean(axis=1) / norm)

    def back(g):
        safe = np.where(dist > 0, dist, 1.0)
        unit = np.where(dist[..., None] > 0, diff / safe[..., None], 0.0)
        return (unit * (g / (B * N * norm))[:, None, None],)

    return _result(np.array(loss), (pred,), back, "landmark_nme")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float, beta2: float, eps: float, t: int):
    """One bias-corrected Adam update; returns new (params, state) without mutating inputs."""
    if t < 1:
        raise ValueError(f"Adam step count must be >= 1, got {t}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        mhat = m[name] / c1
        vhat = v[name] / c2
        new_params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + eps)
    return new_params, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor and must be smooth at ``x``. ``coords``
    restricts the comparison to the given flat indices.
    """
    if not x.requires_grad:
        raise ValueError("grad_check needs a tensor with requires_grad=True")
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = x.grad.reshape(-1).copy()
    base = x.values
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    try:
        for i in idx:
            plus = base.copy()
            plus.reshape(-1)[i] += step
            x.values = plus
            fp = f(x).values.item()
            minus = base.copy()
            minus.reshape(-1)[i] -= step
            x.values = minus
            fm = f(x).values.item()
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    finally:
        x.values = base
    return worst

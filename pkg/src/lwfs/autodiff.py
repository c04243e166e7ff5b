"""Reverse-mode automatic differentiation over dense float64 tensors.

Eager graph construction in the micrograd style: every op computes its value
immediately and records a backward closure. Graphs can be re-executed with new
leaf values via ``forward`` (used by the finite-difference checker), so each op
also records a recompute closure.

Op set: add, mul, matmul, conv1d, sigmoid, tanh, softmax, log_softmax, concat,
slice_axis, sum, mean, logsumexp. All math is float64.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the op that raised."""


class GraphError(RuntimeError):
    """Misuse of the graph API (non-scalar backward, unbound leaf, ...)."""


class Tensor:
    """A node in the computation DAG holding a float64 array and its grad.

    Leaves are created directly (``Tensor(data)`` or the ``leaf`` helper);
    interior nodes are created by ops. ``grad`` is allocated lazily by
    ``backward`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "name", "trainable", "_parents", "_op",
                 "_backward", "_recompute")

    def __init__(self, data, *, name=None, trainable=False,
                 _parents=(), _op="leaf", _recompute=None, _validate=True):
        data = np.asarray(data, dtype=np.float64)
        if _validate and not np.all(np.isfinite(data)):
            raise ValueError(
                f"non-finite values not admitted into a graph (leaf {name or '<unnamed>'})")
        self.data = data
        self.grad = None
        self.name = name
        self.trainable = trainable
        self._parents = tuple(_parents)
        self._op = _op
        self._backward = None
        self._recompute = _recompute

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = self.name or self._op
        return f"Tensor({tag}, shape={self.data.shape})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self):
        backward(self)


def leaf(data, *, name=None, trainable=False) -> Tensor:
    return Tensor(data, name=name, trainable=trainable)


def constant(data, *, name=None) -> Tensor:
    return Tensor(data, name=name, trainable=False)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; LSTM graphs exceed Python's recursion limit.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every node.

    Grads are reset to zero first, so repeated calls on the same graph
    produce identical results. ``root`` must hold exactly one element.
    """
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.data.shape}")
    order = _topo_order(root)
    for node in order:
        node.grad = np.zeros_like(node.data)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def forward(root: Tensor, bindings: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Re-execute the graph under ``root`` and return its value.

    ``bindings`` maps leaf names to replacement arrays (same shape/dtype
    discipline as the original). Every named binding must match a leaf in
    the graph.
    """
    order = _topo_order(root)
    if bindings:
        by_name = {n.name: n for n in order if n._op == "leaf" and n.name is not None}
        for name, value in bindings.items():
            if name not in by_name:
                raise GraphError(f"binding {name!r} does not match any leaf in the graph")
            node = by_name[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != node.data.shape:
                raise ShapeMismatch(
                    f"binding {name!r}: expected shape {node.data.shape}, got {value.shape}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"non-finite values not admitted into a graph (binding {name!r})")
            node.data = value
    for node in order:
        if node._recompute is not None:
            node.data = node._recompute()
    return root.data


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(op: str, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor(fn(), _parents=parents, _op=op, _recompute=fn, _validate=False)
    return out


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    out = _node("add", (a, b), lambda: a.data + b.data)

    def _bw():
        a.grad += _unbroadcast(out.grad, a.data.shape)
        b.grad += _unbroadcast(out.grad, b.data.shape)

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    out = _node("mul", (a, b), lambda: a.data * b.data)

    def _bw():
        a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
        b.grad += _unbroadcast(out.grad * a.data, b.data.shape)

    out._backward = _bw
    return out


def sigmoid(x) -> Tensor:
    x = _lift(x)

    def _fn():
        return 1.0 / (1.0 + np.exp(-x.data))

    out = _node("sigmoid", (x,), _fn)

    def _bw():
        y = out.data
        x.grad += out.grad * y * (1.0 - y)

    out._backward = _bw
    return out


def tanh(x) -> Tensor:
    x = _lift(x)
    out = _node("tanh", (x,), lambda: np.tanh(x.data))

    def _bw():
        x.grad += out.grad * (1.0 - out.data * out.data)

    out._backward = _bw
    return out


# -- linear algebra ----------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D."""
    a, b = _lift(a), _lift(b)
    if b.data.ndim != 2:
        raise ShapeMismatch(f"matmul: right operand must be 2-D, got {b.data.shape}")
    if a.data.ndim < 2 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = _node("matmul", (a, b), lambda: a.data @ b.data)

    def _bw():
        a.grad += out.grad @ b.data.T
        k = a.data.shape[-1]
        b.grad += a.data.reshape(-1, k).T @ out.grad.reshape(-1, b.data.shape[1])

    out._backward = _bw
    return out


def conv1d(x, w, bias=None, stride: int = 1) -> Tensor:
    """1-D convolution over time with zero 'same' padding.

    x: (B, T, Cin); w: (K, Cin, Cout); bias: (Cout,) optional.
    Output length T' = (T + 2*(K//2) - K) // stride + 1 (== T when stride=1).
    """
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeMismatch(f"conv1d: need x (B,T,Cin) and w (K,Cin,Cout), got {x.data.shape}, {w.data.shape}")
    if x.data.shape[2] != w.data.shape[1]:
        raise ShapeMismatch(f"conv1d: channel mismatch, x {x.data.shape} vs w {w.data.shape}")
    if stride < 1:
        raise ValueError("conv1d: stride must be >= 1")
    K, cin, cout = w.data.shape
    pad = K // 2
    parents = (x, w) if bias is None else (x, w, _lift(bias))

    def _windows():
        B, T, _ = x.data.shape
        xp = np.zeros((B, T + 2 * pad, cin))
        xp[:, pad:pad + T] = x.data
        win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=1)  # (B, T+2p-K+1, Cin, K)
        return np.ascontiguousarray(win[:, ::stride].transpose(0, 1, 3, 2))  # (B, T', K, Cin)

    def _fn():
        win = _windows()
        B, tout = win.shape[0], win.shape[1]
        y = win.reshape(B, tout, K * cin) @ w.data.reshape(K * cin, cout)
        if bias is not None:
            y = y + parents[2].data
        return y

    out = _node("conv1d", parents, _fn)

    def _bw():
        B, T, _ = x.data.shape
        tout = out.data.shape[1]
        g = out.grad
        win = _windows()
        w.grad += (win.reshape(-1, K * cin).T @ g.reshape(-1, cout)).reshape(K, cin, cout)
        dwin = (g.reshape(-1, cout) @ w.data.reshape(K * cin, cout).T).reshape(B, tout, K, cin)
        dxp = np.zeros((B, T + 2 * pad, cin))
        pos = np.arange(tout) * stride
        for k in range(K):
            dxp[:, pos + k] += dwin[:, :, k]
        x.grad += dxp[:, pad:pad + T]
        if bias is not None:
            parents[2].grad += g.sum(axis=(0, 1))

    out._backward = _bw
    return out


def conv1d_output_length(t: int, kernel: int, stride: int) -> int:
    return (t + 2 * (kernel // 2) - kernel) // stride + 1


# -- normalizers -------------------------------------------------------

def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _lift(x)

    def _fn():
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    out = _node("softmax", (x,), _fn)

    def _bw():
        y = out.data
        x.grad += y * (out.grad - (out.grad * y).sum(axis=-1, keepdims=True))

    out._backward = _bw
    return out


def log_softmax(x) -> Tensor:
    """Log-softmax over the last axis."""
    x = _lift(x)

    def _fn():
        z = x.data - x.data.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    out = _node("log_softmax", (x,), _fn)

    def _bw():
        p = np.exp(out.data)
        x.grad += out.grad - p * out.grad.sum(axis=-1, keepdims=True)

    out._backward = _bw
    return out


def logsumexp(x) -> Tensor:
    """Log-sum-exp over the last axis (the CTC-safe probability chain primitive)."""
    x = _lift(x)

    def _fn():
        m = x.data.max(axis=-1, keepdims=True)
        return (m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True)))[..., 0]

    out = _node("logsumexp", (x,), _fn)

    def _bw():
        p = np.exp(x.data - out.data[..., None])
        x.grad += out.grad[..., None] * p

    out._backward = _bw
    return out


# -- structural --------------------------------------------------------

def concat(xs, axis: int) -> Tensor:
    xs = tuple(_lift(x) for x in xs)
    if not xs:
        raise ValueError("concat: empty input list")
    base = list(xs[0].data.shape)
    for x in xs[1:]:
        s = list(x.data.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeMismatch(f"concat: incompatible shapes {[x.data.shape for x in xs]} on axis {axis}")
    out = _node("concat", xs, lambda: np.concatenate([x.data for x in xs], axis=axis))

    def _bw():
        start = 0
        idx = [slice(None)] * out.data.ndim
        for x in xs:
            n = x.data.shape[axis]
            idx[axis] = slice(start, start + n)
            x.grad += out.grad[tuple(idx)]
            start += n

    out._backward = _bw
    return out


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _lift(x)
    n = x.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeMismatch(f"slice_axis: [{start}:{stop}] out of range for axis {axis} of {x.data.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = _node("slice", (x,), lambda: x.data[idx])

    def _bw():
        x.grad[idx] += out.grad

    out._backward = _bw
    return out


def sum_all(x) -> Tensor:
    x = _lift(x)
    out = _node("sum", (x,), lambda: np.asarray(x.data.sum()))

    def _bw():
        x.grad += out.grad

    out._backward = _bw
    return out


def mean_all(x) -> Tensor:
    x = _lift(x)
    out = _node("mean", (x,), lambda: np.asarray(x.data.mean()))

    def _bw():
        x.grad += out.grad / x.data.size

    out._backward = _bw
    return out


# -- finite-difference oracle -------------------------------------------

def grad_check(f, params: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backward grads and central finite differences.

    ``f`` builds a scalar graph from the named leaf ``params``; the graph is
    built once and re-executed with perturbed bindings. Relative error per
    element is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    if params.name is None:
        raise GraphError("grad_check: params leaf must be named for rebinding")
    root = f(params)
    backward(root)
    g_ad = params.grad.copy()
    base = params.data.copy()
    g_fd = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] += eps
        hi = forward(root, {params.name: probe.reshape(base.shape)}).item()
        probe[i] = flat[i] - eps
        lo = forward(root, {params.name: probe.reshape(base.shape)}).item()
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError("grad_check: non-finite intermediate during finite differences")
        g_fd.reshape(-1)[i] = (hi - lo) / (2.0 * eps)
    forward(root, {params.name: base})
    denom = np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom))

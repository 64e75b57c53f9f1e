"""Small reverse-mode autodiff engine over float64 numpy tensors.

Graphs are dynamic: every op returns a new :class:`Tensor` that remembers its
parents and a closure computing vector-Jacobian products. ``backward`` sorts
the reachable nodes topologically and accumulates gradients into ``.grad``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class MissingGradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "vjp", "op", "requires_grad", "aux")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.aux = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(value, parents, vjp, op):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, parents=parents, vjp=vjp, op=op)


def _binary(a, b, fn, name):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fn(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from exc
    return a, b, out


def add(a, b) -> Tensor:
    a, b, out = _binary(a, b, np.add, "add")
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b, out = _binary(a, b, np.subtract, "sub")
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b, out = _binary(a, b, np.multiply, "mul")
    return _node(
        out, (a, b), lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul"
    )


def div(a, b) -> Tensor:
    a, b, out = _binary(a, b, np.divide, "div")
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching semantics (``b`` may be a shared 2-D weight)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.value @ b.value

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), vjp, "matmul")


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, tensors, vjp, "concat")


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return reduce_sum(a, axis=axis) * (1.0 / n)


def reduce_max(a, axis) -> Tensor:
    """Max over a set axis; the argmax is recorded and receives the whole gradient."""
    a = as_tensor(a)
    arg = np.argmax(a.value, axis=axis)
    out = np.take_along_axis(a.value, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    node = _node(out, (a,), vjp, "max")
    node.aux = arg
    return node


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.logaddexp(0.0, a.value), (a,), lambda g: (g * expit(a.value),), "softplus")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.value)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def logsumexp(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp.reduce(a.value, axis=axis)
    soft = np.exp(a.value - np.expand_dims(out, axis))
    return _node(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.value**2, (a,), lambda g: (2.0 * g * a.value,), "square")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0),), "relu")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from exc
    return _node(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, ax1, ax2) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.value, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.value[idx], (a,), vjp, "index")


def maximum_const(a, floor: float) -> Tensor:
    """``max(a, floor)`` for a constant floor (subgradient 0 at the kink)."""
    a = as_tensor(a)
    return _node(np.maximum(a.value, floor), (a,), lambda g: (g * (a.value > floor),), "clip_min")


class Graph:
    """Topologically ordered nodes reachable from an output."""

    def __init__(self, output: Tensor):
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, seed=None) -> Graph:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    ``loss`` must be scalar unless an explicit output cotangent ``seed`` is given.
    Gradients accumulate across calls; use :func:`zero_grad` to reset.
    """
    if seed is None:
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.value)
    graph = Graph(loss)
    grads = {id(loss): np.asarray(seed, dtype=np.float64)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return graph


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.value)):
        raise FloatingPointError(f"non-finite values produced at {where}")
    return t


class ParamStore:
    """Named parameters with Adam moment buffers."""

    def __init__(self, params=None):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.grads: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def leaves(self, requires_grad=True) -> dict[str, Tensor]:
        """Fresh leaf tensors for one forward pass."""
        return {n: Tensor(v, requires_grad=requires_grad and n not in self.frozen) for n, v in self.params.items()}

    def collect_grads(self, leaves: dict[str, Tensor]) -> None:
        for name, leaf in leaves.items():
            g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
            self.grads[name] = self.grads.get(name, 0.0) + g

    def zero_grads(self):
        self.grads = {}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        for name, value in arrays.items():
            self.add(name, value)


def adam_step(store: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> ParamStore:
    """One bias-corrected Adam update, in place; frozen parameters are skipped."""
    active = [n for n in store.params if n not in store.frozen]
    missing = [n for n in active if n not in store.grads]
    if missing:
        raise MissingGradientError(f"no gradient for parameters {missing}")
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for name in active:
        g = store.grads[name]
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        store.params[name] = store.params[name] - lr * (store.m[name] / c1) / (np.sqrt(store.v[name] / c2) + eps)
    store.zero_grads()
    return store


class Adam:
    """Adam on plain arrays, for code that computes gradients analytically."""

    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step_count = 0

    def step(self, params, grads):
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def numerical_gradient(fn, x: np.ndarray, h=1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)))) if analytic.size else 0.0


# -- checkpoint container -----------------------------------------------------

CHECKPOINT_VERSION = 1


def save_arrays(path, arrays: dict, meta: dict | None = None) -> Path:
    """Write named float arrays plus a JSON metadata header to an ``.npz`` file.

    Layout: one npz member per array (numpy's own shape/dtype header) and a
    ``__meta__`` member holding UTF-8 JSON bytes as uint8, including
    ``format_version``.
    """
    path = Path(path)
    meta = dict(meta or {})
    meta["format_version"] = CHECKPOINT_VERSION
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    if "__meta__" in payload:
        raise ValueError("'__meta__' is a reserved array name")
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_arrays(path):
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode()) if "__meta__" in data.files else {}
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("format_version", CHECKPOINT_VERSION) > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint format {meta['format_version']} is newer than supported {CHECKPOINT_VERSION}")
    return arrays, meta

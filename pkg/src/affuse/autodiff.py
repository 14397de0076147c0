"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  The graph lives
only as long as the tensors reference each other; a fresh graph is built on
every forward pass.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ValidationError

PROB_FLOOR = 1e-12

_GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")
    # make ndarray <op> Tensor defer to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.backward_fn: _GradFn | None = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self.parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _record(data, parents, backward_fn, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), grad_fn, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form is overflow-free and gives sigmoid(0) == 0.5 exactly
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def clip(a, lo, hi) -> Tensor:
    """Clamp to [lo, hi]; gradient flows only where the input was inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape, detail="expected (n,k) @ (k,m)")

    def grad_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------- reductions / layout

def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), grad_fn, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record(out, (a,), grad_fn, "mean")


def concat(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat requires at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for d, (s, r) in enumerate(zip(t.shape, ref)) if d != axis % len(ref)
        ):
            raise DimensionError("concat", ref, t.shape, detail=f"axis={axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out), (a,), grad_fn, "slice")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", a.shape, shape) from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.T, (a,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------- normalisation

def l2_normalize(a) -> Tensor:
    """Scale each row to unit Euclidean norm; zero rows stay zero with zero gradient."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("l2_normalize", a.shape, detail="expected a 2-D matrix")
    norm = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    nonzero = norm > 0
    safe = np.where(nonzero, norm, 1.0)
    y = np.where(nonzero, a.data / safe, 0.0)

    def grad_fn(g):
        proj = np.sum(y * g, axis=1, keepdims=True)
        return (np.where(nonzero, (g - y * proj) / safe, 0.0),)

    return _record(y, (a,), grad_fn, "l2_normalize")


def _softmax_rows(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    a = as_tensor(a)
    y = _softmax_rows(a.data)

    def grad_fn(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _record(y, (a,), grad_fn, "softmax")


def _check_targets(targets, n, n_class):
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise DimensionError("softmax_cross_entropy", (n, n_class), targets.shape,
                             detail="one target per row")
    if not np.issubdtype(targets.dtype, np.integer):
        if not np.all(np.equal(np.mod(targets, 1), 0)):
            raise ValidationError("class targets must be integers")
        targets = targets.astype(np.int64)
    bad = (targets < 0) | (targets >= n_class)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValidationError(
            f"class index {int(targets[i])} out of range [0, {n_class - 1}]", location=f"row {i}")
    return targets


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy", logits.shape, detail="expected (N, C) logits")
    n, n_class = logits.shape
    targets = _check_targets(targets, n, n_class)
    p = _softmax_rows(logits.data)
    rows = np.arange(n)
    loss = -np.mean(np.log(np.maximum(p[rows, targets], PROB_FLOOR)))

    def grad_fn(g):
        d = p.copy()
        d[rows, targets] -= 1.0
        return (d * (g / n),)

    return _record(loss, (logits,), grad_fn, "softmax_cross_entropy")


# ---------------------------------------------------------------- backward pass

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry gradients, inputs first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring gradients")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- optimiser

class Adam:
    """Adam with bias correction; clears gradients after every step."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ContractError(f"parameters {missing} have no gradient; run backward first")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self):
        return {"lr": self.lr, "step": self.step_count,
                "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


# ---------------------------------------------------------------- checkpoints
#
# Layout: b"AFCK" | uint32 LE version | uint64 LE index length | UTF-8 JSON index
#         | float64 LE payload.  The index maps name -> {"shape", "offset", "count"}
#         with offsets counted in float64 elements from the start of the payload.

_MAGIC = b"AFCK"
_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    index, chunks, offset = {}, [], 0
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        index[name] = {"shape": list(arr.shape), "offset": offset, "count": int(arr.size)}
        chunks.append(arr.reshape(-1).tobytes())
        offset += arr.size
    header = json.dumps(index, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValidationError("not a checkpoint file (bad magic)", location=str(path))
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != _VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}", location=str(path))
    start = 4 + struct.calcsize("<IQ")
    index = json.loads(raw[start:start + hlen])
    payload = np.frombuffer(raw, dtype="<f8", offset=start + hlen)
    out = {}
    for name, entry in index.items():
        lo = entry["offset"]
        hi = lo + entry["count"]
        if hi > payload.size:
            raise ValidationError(f"truncated payload for {name!r}", location=str(path))
        out[name] = payload[lo:hi].astype(np.float64).reshape(tuple(entry["shape"]))
    return out

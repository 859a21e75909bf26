"""Minimal dense tensors with reverse-mode differentiation.

Only the primitives the document model needs are provided. Each primitive
is a class with a pure ``forward`` on numpy arrays and a ``backward`` that
maps the output gradient to input gradients. Applying a primitive to
:class:`Tensor` inputs records a :class:`Node`; :class:`Trace` orders the
nodes reachable from an output, and :func:`backprop` walks it in reverse.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import kernels
from .errors import (
    DimensionError,
    InvalidGraphError,
    NonFiniteError,
    ReproducibilityError,
    UsageError,
)

DTYPES = {64: np.float64, 32: np.float32}

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable recording; used for inference-only encoding."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _not_scalar(t: Tensor):
    raise UsageError(f"tensor of shape {t.shape} is not a scalar")


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


@dataclass(eq=False)
class Node:
    """One recorded primitive application."""

    op: type
    inputs: tuple
    attrs: dict
    ctx: object
    output: Tensor


def apply(op, *inputs: Tensor, **attrs) -> Tensor:
    return _apply(op, inputs, attrs)[0]


def _apply(op, inputs: tuple, attrs: dict) -> tuple[Tensor, object]:
    arrays = [t.data for t in inputs]
    out, ctx = op.forward(*arrays, **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op.__name__} produced a non-finite value")
    result = Tensor(out)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(op, inputs, attrs, ctx, result)
    return result, ctx


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives


class Add:
    @staticmethod
    def forward(a, b):
        return a + b, None

    @staticmethod
    def backward(ctx, g, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub:
    @staticmethod
    def forward(a, b):
        return a - b, None

    @staticmethod
    def backward(ctx, g, a, b):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


class Mul:
    @staticmethod
    def forward(a, b):
        return a * b, None

    @staticmethod
    def backward(ctx, g, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Scale:
    @staticmethod
    def forward(x, c):
        return x * x.dtype.type(c), None

    @staticmethod
    def backward(ctx, g, x, c):
        return (g * g.dtype.type(c),)


class Affine:
    """``x @ W.T + b``; ``b`` may be omitted."""

    @staticmethod
    def forward(x, W, b=None):
        out = x @ W.T
        if b is not None:
            out = out + b
        return out, None

    @staticmethod
    def backward(ctx, g, x, W, b=None):
        grads = (g @ W, g.T @ x)
        if b is not None:
            grads += (g.sum(axis=0),)
        return grads


class MatMulNT:
    """``a @ b.T``."""

    @staticmethod
    def forward(a, b):
        return a @ b.T, None

    @staticmethod
    def backward(ctx, g, a, b):
        return g @ b, g.T @ a


class Tanh:
    @staticmethod
    def forward(x):
        y = np.tanh(x)
        return y, y

    @staticmethod
    def backward(y, g, x):
        return (g * (1.0 - y * y),)


class Elu:
    @staticmethod
    def forward(x):
        neg = np.expm1(np.minimum(x, 0.0))
        return np.where(x > 0, x, neg), neg

    @staticmethod
    def backward(neg, g, x):
        return (np.where(x > 0, g, g * (neg + 1.0)),)


class LeakyRelu:
    @staticmethod
    def forward(x, slope):
        return np.where(x < 0, x * x.dtype.type(slope), x), None

    @staticmethod
    def backward(ctx, g, x, slope):
        return (np.where(x < 0, g * g.dtype.type(slope), g),)


class MaskedSoftmax:
    """Softmax over the last axis restricted to ``mask``; masked entries are 0."""

    @staticmethod
    def forward(scores, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape:
            raise DimensionError(f"mask shape {mask.shape} != scores shape {scores.shape}")
        if not np.all(mask.any(axis=-1)):
            raise InvalidGraphError("masked_softmax over an empty neighbourhood")
        masked = np.where(mask, scores, -np.inf)
        shifted = masked - masked.max(axis=-1, keepdims=True)
        ex = np.where(mask, np.exp(shifted), 0.0)
        p = ex / ex.sum(axis=-1, keepdims=True)
        return p.astype(scores.dtype, copy=False), p

    @staticmethod
    def backward(p, g, scores, mask):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)


class Sum:
    @staticmethod
    def forward(x):
        return np.asarray(x.sum(), dtype=x.dtype), None

    @staticmethod
    def backward(ctx, g, x):
        return (np.broadcast_to(g, x.shape).copy(),)


class Mean:
    @staticmethod
    def forward(x):
        return np.asarray(x.mean(), dtype=x.dtype), None

    @staticmethod
    def backward(ctx, g, x):
        return (np.full(x.shape, g / x.size, dtype=x.dtype),)


class Concat:
    @staticmethod
    def forward(*xs, axis):
        return np.concatenate(xs, axis=axis), None

    @staticmethod
    def backward(ctx, g, *xs, axis):
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))


class SliceRows:
    @staticmethod
    def forward(x, start, stop):
        return x[start:stop].copy(), None

    @staticmethod
    def backward(ctx, g, x, start, stop):
        out = np.zeros_like(x)
        out[start:stop] = g
        return (out,)


class Reshape:
    @staticmethod
    def forward(x, shape):
        return x.reshape(shape).copy(), None

    @staticmethod
    def backward(ctx, g, x, shape):
        return (g.reshape(x.shape),)


class EmbeddingBag:
    """Mean of table rows per bag; an empty bag pools to zeros."""

    @staticmethod
    def forward(table, ids, offsets):
        return kernels.embedding_bag_forward(table, ids, offsets), None

    @staticmethod
    def backward(ctx, g, table, ids, offsets):
        return (kernels.embedding_bag_backward(np.ascontiguousarray(g), ids, offsets, table.shape[0]),)


class GraphAttention:
    """One attention head over a CSR neighbourhood structure.

    Row ``i`` attends over ``indices[indptr[i]:indptr[i+1]]`` with score
    ``leaky_relu(a[:d] . z_i + a[d:] . z_j)``; the output row is the
    attention-weighted sum of neighbour rows of ``z``.
    """

    @staticmethod
    def forward(z, a, indptr, indices, slope):
        if a.shape != (2 * z.shape[1],):
            raise DimensionError(f"attention vector {a.shape} does not match head dim {z.shape[1]}")
        out, alpha = kernels.gat_forward(z, a, indptr, indices, slope)
        return out, alpha

    @staticmethod
    def backward(alpha, g, z, a, indptr, indices, slope):
        return kernels.gat_backward(np.ascontiguousarray(g), z, a, alpha, indptr, indices, slope)


class SoftmaxCrossEntropy:
    """Mean over rows of ``-log softmax(logits)[i, targets[i]]``."""

    @staticmethod
    def forward(logits, targets):
        m = logits.max(axis=1, keepdims=True)
        shifted = logits - m
        lse = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(logits.shape[0])
        picked = shifted[rows, targets]
        loss = np.asarray((lse - picked).mean(), dtype=logits.dtype)
        return loss, lse

    @staticmethod
    def backward(lse, g, logits, targets):
        n = logits.shape[0]
        p = np.exp(logits - logits.max(axis=1, keepdims=True) - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        return (p * (g / n),)


class NormalizeRows:
    @staticmethod
    def forward(x):
        norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
        norm = np.maximum(norm, 1e-12)
        return x / norm, norm

    @staticmethod
    def backward(norm, g, x):
        y = x / norm
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)


# ---------------------------------------------------------------- functional API


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply(Add, a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply(Sub, a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply(Mul, a, b)


def scale(x: Tensor, c: float) -> Tensor:
    return apply(Scale, x, c=c)


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Return ``x @ W.T + b`` for ``x`` [m, k], ``W`` [n, k], ``b`` [n]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"affine: x {x.shape} incompatible with W {W.shape}")
    if b is None:
        return apply(Affine, x, W)
    if b.shape != (W.shape[0],):
        raise DimensionError(f"affine: bias {b.shape} incompatible with W {W.shape}")
    return apply(Affine, x, W, b)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_nt: {a.shape} vs {b.shape}")
    return apply(MatMulNT, a, b)


_POINTWISE = {"tanh": Tanh, "elu": Elu, "leaky_relu": LeakyRelu}


def pointwise(name: str, x: Tensor, slope: float | None = None) -> Tensor:
    if name not in _POINTWISE:
        raise UsageError(f"unknown pointwise function {name!r}")
    if name == "leaky_relu":
        if slope is None:
            raise UsageError("leaky_relu requires a slope")
        return apply(LeakyRelu, x, slope=slope)
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"{name} received a non-finite input")
    return apply(_POINTWISE[name], x)


def tanh(x: Tensor) -> Tensor:
    return pointwise("tanh", x)


def elu(x: Tensor) -> Tensor:
    return pointwise("elu", x)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    return pointwise("leaky_relu", x, slope)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    return apply(MaskedSoftmax, scores, mask=np.asarray(mask, dtype=bool))


def sum_all(x: Tensor) -> Tensor:
    return apply(Sum, x)


def mean_all(x: Tensor) -> Tensor:
    return apply(Mean, x)


def concat(xs: list[Tensor], axis: int) -> Tensor:
    return apply(Concat, *xs, axis=axis)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    return apply(SliceRows, x, start=start, stop=stop)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return apply(Reshape, x, shape=tuple(shape))


def embedding_bag(table: Tensor, ids: np.ndarray, offsets: np.ndarray) -> Tensor:
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("embedding_bag: id out of range")
    return apply(EmbeddingBag, table, ids=ids, offsets=offsets)


def graph_attention(z: Tensor, a: Tensor, indptr: np.ndarray, indices: np.ndarray,
                    slope: float) -> tuple[Tensor, np.ndarray]:
    """Return the aggregated rows and the per-edge attention weights."""
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    if indptr.shape[0] != z.shape[0] + 1:
        raise DimensionError(f"graph has {indptr.shape[0] - 1} nodes, states have {z.shape[0]} rows")
    if np.any(np.diff(indptr) <= 0):
        raise InvalidGraphError("every node needs at least one neighbour (its self-loop)")
    return _apply(GraphAttention, (z, a), dict(indptr=indptr, indices=indices, slope=float(slope)))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape}, targets {targets.shape}")
    return apply(SoftmaxCrossEntropy, logits, targets=targets)


def normalize_rows(x: Tensor) -> Tensor:
    return apply(NormalizeRows, x)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named parameters, iterated in lexicographic path order."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._items: dict[str, Tensor] = {}
        for path, t in (tensors or {}).items():
            self.add(path, t)

    def add(self, path: str, value) -> Tensor:
        if path in self._items:
            raise UsageError(f"duplicate parameter path {path!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._items[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._items[path]

    def __contains__(self, path: str) -> bool:
        return path in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._items))

    def paths(self) -> list[str]:
        return sorted(self._items)

    def items(self):
        return [(p, self._items[p]) for p in sorted(self._items)]

    def merged(self, other: "ParamStore") -> "ParamStore":
        """Union of two stores sharing the same Tensor objects."""
        out = ParamStore()
        for p, t in self.items() + other.items():
            out.add(p, t)
        return out

    def size(self) -> int:
        return int(sum(t.data.size for t in self._items.values()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p: t.data.copy() for p, t in self.items()}

    def astype(self, dtype) -> None:
        for t in self._items.values():
            t.data = np.ascontiguousarray(t.data, dtype=dtype)


# ---------------------------------------------------------------- trace / backprop


class Trace:
    """Primitive applications reachable from an output, in forward order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Trace":
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            node = t.node
            if node is None:
                continue
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((t, True))
            for inp in reversed(node.inputs):
                if inp.node is not None and id(inp.node) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> bool:
        """Recompute every node from its recorded inputs; True if all outputs match bit-for-bit."""
        recomputed: dict[int, np.ndarray] = {}
        for node in self.nodes:
            arrays = [recomputed.get(id(t), t.data) for t in node.inputs]
            out, _ = node.op.forward(*arrays, **node.attrs)
            if out.dtype != node.output.data.dtype or not np.array_equal(out, node.output.data):
                return False
            recomputed[id(node.output)] = out
        return True


def backprop(loss: Tensor, params: ParamStore | None = None,
             trace: Trace | None = None) -> dict[str, np.ndarray]:
    """Reverse accumulation from a scalar ``loss``.

    Sets ``.grad`` on every tensor that requires it and returns the
    gradients of ``params`` by path; unused parameters get zeros.
    """
    if loss.data.size != 1:
        raise UsageError(f"backprop needs a scalar loss, got shape {loss.shape}")
    trace = trace if trace is not None else Trace.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(trace.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        arrays = [t.data for t in node.inputs]
        in_grads = node.op.backward(node.ctx, g, *arrays, **node.attrs)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if inp.node is None:
                leaves[key] = inp
    for key, t in leaves.items():
        t.grad = grads[key]
    if loss.node is None:
        loss.grad = np.ones_like(loss.data)
    out: dict[str, np.ndarray] = {}
    if params is not None:
        for path, t in params.items():
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
                t.grad = g
            out[path] = g
    return out


def check_gradients(loss_fn: Callable[[], Tensor], params: ParamStore, eps: float = 1e-5,
                    paths: list[str] | None = None) -> float:
    """Max relative error between backprop and central differences.

    Error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise UsageError(f"eps={eps} outside [1e-7, 1e-4]")
    for path, t in params.items():
        if t.data.dtype != np.float64:
            raise UsageError(f"gradient checks need 64-bit parameters; {path} is {t.data.dtype}")
    loss = loss_fn()
    analytic = backprop(loss, params)
    base = float(loss.data)
    if float(loss_fn().data) != base:
        raise ReproducibilityError("loss_fn is not deterministic")
    worst = 0.0
    for path in paths if paths is not None else params.paths():
        data = params[path].data
        flat = data.reshape(-1)
        a_flat = analytic[path].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimisation


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """One Adam update with decoupled weight decay, applied in place."""
    if lr < 0:
        raise UsageError(f"negative learning rate {lr}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for path, p in params.items():
        g = grads[path]
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {path} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(p.data)
            state.v[path] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise DimensionError(f"Adam state for {path} has shape {m.shape}")
        v = state.v[path]
        if weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr * weight_decay)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)


def learning_rate(step: int, total_steps: int, base_lr: float, warmup_rate: float,
                  schedule: str = "linear") -> float:
    """Linear warmup to ``base_lr``, then linear decay to zero (or constant)."""
    if total_steps <= 0:
        raise UsageError("total_steps must be positive")
    if not 0 <= warmup_rate < 1:
        raise UsageError(f"warmup_rate {warmup_rate} outside [0, 1)")
    if schedule not in ("linear", "constant"):
        raise UsageError(f"unknown schedule {schedule!r}")
    step = min(max(step, 0), total_steps)
    warm = warmup_rate * total_steps
    if step < warm:
        return base_lr * step / warm
    if schedule == "constant":
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warm)


"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough machinery to train the two word encoders in :mod:`charcd.models`:
a tape of :class:`Tensor` nodes built eagerly by the op functions below, a
:func:`backward` pass over the tape, deterministic initializers, and Adam.

Every op validates that its result is finite; NaN/Inf anywhere raises
:class:`NonFiniteError` instead of silently propagating.  All data is
``float64`` so the downstream decomposition identities hold at 1e-9.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AutodiffError",
    "NonFiniteError",
    "Rng",
    "Tensor",
    "AdamState",
    "adam_step",
    "backward",
    "orthogonal_init",
    "uniform_init",
]


class AutodiffError(ValueError):
    """Invalid use of the tape (non-scalar loss, shape mismatch, ...)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


# ---------------------------------------------------------------------------
# Deterministic random streams
# ---------------------------------------------------------------------------

class Rng:
    """Seeded random stream backed by numpy's PCG64 generator.

    Identical seeds yield identical streams.  Labeled substreams are derived
    with :meth:`split` so independent consumers (init, shuffling, corpus
    synthesis) cannot perturb each other's draws.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def split(self, label: str) -> "Rng":
        """Derive an independently seeded stream for ``label``."""
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=shape)

    def uniform(self, lo: float, hi: float, shape) -> np.ndarray:
        return self.generator.uniform(lo, hi, size=shape)

    def integers(self, lo: int, hi: int, size=None):
        return self.generator.integers(lo, hi, size=size)

    def random(self) -> float:
        return float(self.generator.random())

    def shuffle(self, items: list) -> None:
        self.generator.shuffle(items)

    def choice_index(self, weights) -> int:
        """Draw an index proportionally to ``weights``."""
        w = np.asarray(weights, dtype=np.float64)
        return int(self.generator.choice(len(w), p=w / w.sum()))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

def _ensure_finite(arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value produced")
    return arr


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode autodiff.

    ``parents`` and ``backward_fn`` are set by the op constructors; leaves
    created directly have neither.  ``grad`` is populated by
    :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward_fn=None):
        self.data = _ensure_finite(np.asarray(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar used throughout the model-building code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))

    def bwd(g):
        a.accum_grad(_unbroadcast(g, a.data.shape))
        b.accum_grad(_unbroadcast(g, b.data.shape))

    out.backward_fn = bwd
    return out


def add_n(tensors: list[Tensor]) -> Tensor:
    """Sum of same-shaped tensors as a single tape node."""
    if not tensors:
        raise AutodiffError("add_n of empty list")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data
    out = Tensor(total, parents=tuple(tensors))

    def bwd(g):
        for t in tensors:
            t.accum_grad(g)

    out.backward_fn = bwd
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, parents=(a,))
    out.backward_fn = lambda g: a.accum_grad(-g)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, parents=(a, b))

    def bwd(g):
        a.accum_grad(_unbroadcast(g * b.data, a.data.shape))
        b.accum_grad(_unbroadcast(g * a.data, b.data.shape))

    out.backward_fn = bwd
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, parents=(a,))
    out.backward_fn = lambda g: a.accum_grad(g * c)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, parents=(a, b))

    def bwd(g):
        a.accum_grad(g @ b.data.T)
        b.accum_grad(a.data.T @ g)

    out.backward_fn = bwd
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), parents=(a,))
    out.backward_fn = lambda g: a.accum_grad(g * (a.data > 0.0))
    return out


def tanh(a: Tensor) -> Tensor:
    val = np.tanh(a.data)
    out = Tensor(val, parents=(a,))
    out.backward_fn = lambda g: a.accum_grad(g * (1.0 - val * val))
    return out


def sigmoid(a: Tensor) -> Tensor:
    val = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500.0, 500.0)))
    out = Tensor(val, parents=(a,))
    out.backward_fn = lambda g: a.accum_grad(g * val * (1.0 - val))
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        start = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + n)
            t.accum_grad(g[tuple(idx)])
            start += n

    out.backward_fn = bwd
    return out


def take_rows(a: Tensor, idx) -> Tensor:
    """Row gather (embedding lookup / im2col); scatter-add on backward."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx], parents=(a,))

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    out.backward_fn = bwd
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), parents=(a,))
    out.backward_fn = lambda g: a.accum_grad(g.reshape(a.data.shape))
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[:, start:stop], parents=(a,))

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[:, start:stop] += g

    out.backward_fn = bwd
    return out


def max_over_time(a: Tensor) -> Tensor:
    """Column-wise max of a (positions, filters) matrix; first argmax wins."""
    pos = np.argmax(a.data, axis=0)
    cols = np.arange(a.data.shape[1])
    out = Tensor(a.data[pos, cols], parents=(a,))

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[pos, cols] += g

    out.backward_fn = bwd
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), parents=(a,))
    out.backward_fn = lambda g: a.accum_grad(np.broadcast_to(g, a.data.shape).copy())
    return out


def softmax_cross_entropy(logits: Tensor, gold: int) -> Tensor:
    """-log softmax(logits)[gold] via log-sum-exp; logits is 1-D."""
    z = logits.data
    if z.ndim != 1:
        raise AutodiffError("softmax_cross_entropy expects a 1-D logit vector")
    if not 0 <= gold < z.shape[0]:
        raise AutodiffError(f"gold index {gold} out of range for {z.shape[0]} classes")
    m = z.max()
    exps = np.exp(z - m)
    lse = m + np.log(exps.sum())
    out = Tensor(lse - z[gold], parents=(logits,))
    probs = exps / exps.sum()

    def bwd(g):
        grad = probs * g
        grad[gold] -= g
        logits.accum_grad(grad)

    out.backward_fn = bwd
    return out


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: dict[str, Tensor] | None = None):
    """Reverse pass from a scalar loss.

    With ``params`` given, returns one gradient array per named parameter;
    a parameter the loss does not reach gets a zero gradient and a warning.
    """
    if loss.data.shape != ():
        raise AutodiffError("backward requires a scalar loss")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones(())
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
    if params is None:
        return None
    grads: dict[str, np.ndarray] = {}
    unreached = []
    for name, p in params.items():
        if p.grad is None:
            unreached.append(name)
            grads[name] = np.zeros_like(p.data)
        else:
            grads[name] = _ensure_finite(p.grad)
    if unreached:
        warnings.warn(f"parameters unreachable from loss: {unreached}")
    return grads


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------

def orthogonal_init(rows: int, cols: int, rng: Rng) -> np.ndarray:
    """Orthogonal matrix from QR of a seeded Gaussian draw.

    The R diagonal is sign-corrected to be positive, making the result a
    deterministic function of the seed.  Rows are orthonormal when
    ``rows <= cols``, columns otherwise.
    """
    if rows < 1 or cols < 1:
        raise AutodiffError("orthogonal_init requires positive dimensions")
    transpose = rows < cols
    n, m = (cols, rows) if transpose else (rows, cols)
    gaussian = rng.normal((n, m))
    q, r = np.linalg.qr(gaussian)
    q = q * np.sign(np.where(np.diag(r) == 0.0, 1.0, np.diag(r)))
    return np.ascontiguousarray(q.T if transpose else q)


def uniform_init(shape, lo: float, hi: float, rng: Rng) -> np.ndarray:
    """Elementwise uniform draw on [lo, hi)."""
    if not lo < hi:
        raise AutodiffError(f"uniform_init requires lo < hi, got [{lo}, {hi})")
    return rng.uniform(lo, hi, shape)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    if lr < 0:
        raise AutodiffError("adam_step requires lr >= 0")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise AutodiffError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        _ensure_finite(p.data)
    return state

"""Small reverse-mode autodiff over float64 numpy arrays.

Each op builds a new :class:`Tensor` holding its parents and a closure that
pushes the upstream gradient back into them.  ``Tensor.backward`` walks the
graph in reverse topological order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12

TRAIN = "train"
MC_EVAL = "mc_eval"
DETERMINISTIC = "deterministic"
_MODES = (TRAIN, MC_EVAL, DETERMINISTIC)


class NonFiniteError(FloatingPointError):
    """A tensor picked up NaN or Inf."""


class ShapeError(ValueError):
    pass


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"non-finite values produced by {op!r}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, op or "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate ``.grad`` of every reachable leaf with d(self)/d(leaf).

        Gradients accumulate across calls until :meth:`zero_grad`.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        # interior node grads are scratch space; leaves keep theirs
        upstream: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                upstream[key] = upstream[key] + pg if key in upstream else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _make(a.data + b.data, (a, b), "add", back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return [(a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))]

    return _make(a.data * b.data, (a, b), "mul", back)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: [(a, -g)])


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: [(a, g * c)])


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: [(x, g * mask)])


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), "sigmoid", lambda g: [(x, g * out * (1.0 - out))])


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log clamped below at ``log(floor)``; clamped entries get zero gradient."""
    live = x.data > floor
    safe = np.where(live, x.data, floor)
    return _make(np.log(safe), (x,), "log", lambda g: [(x, np.where(live, g / safe, 0.0))])


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), "abs", lambda g: [(x, g * sign)])


def power(x: Tensor, q: float) -> Tensor:
    q = float(q)
    if q == 1.0:
        return _make(x.data.copy(), (x,), "pow", lambda g: [(x, g)])
    out = x.data ** q
    return _make(out, (x,), "pow", lambda g: [(x, g * q * x.data ** (q - 1.0))])


# reductions and reshaping --------------------------------------------------

def total(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(g, x.shape))]

    return _make(out, (x,), "sum", back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(total(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), "reshape", lambda g: [(x, g.reshape(x.shape))])


def take(x: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return [(x, full)]

    return _make(x.data[idx], (x,), "take", back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return list(zip(tensors, np.split(g, bounds, axis=axis)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", back)


# layers --------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data @ b.data, (a, b), "matmul", lambda g: [(a, g @ b.data.T), (b, a.data.T @ g)])


def dense_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``[B, in]``."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(
            f"dense: input {x.shape} incompatible with weight {weight.shape} / bias {bias.shape}"
        )

    def back(g):
        return [(x, g @ weight.data.T), (weight, x.data.T @ g), (bias, g.sum(axis=0))]

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), "dense", back)


def gradient_reversal(x: Tensor, coeff: float) -> Tensor:
    """Identity on the way forward; scales the gradient by ``-coeff`` on the way back."""
    if coeff < 0:
        raise ValueError(f"gradient reversal coefficient must be >= 0, got {coeff}")
    c = -float(coeff)
    return _make(x.data.copy(), (x,), "grad_reverse", lambda g: [(x, g * c)])


def softmax_temp(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / tau``."""
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return [(logits, out * (g - inner) / tau)]

    return _make(out, (logits,), "softmax", back)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row distributions ``probs``."""
    labels = np.asarray(labels)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    picked = take(probs, (np.arange(n), labels.astype(np.intp)))
    return neg(mean(log(picked)))


# dropout -------------------------------------------------------------------

@dataclass(frozen=True)
class DropoutSpec:
    p: float
    rng_stream_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.p}")


def dropout_mask(shape, p: float, seed: int, stream_id: int, step: int, pass_index: int) -> np.ndarray:
    """Bernoulli keep-mask, a pure function of ``(seed, stream_id, step, pass_index)``."""
    ss = np.random.SeedSequence([int(seed), int(stream_id), int(step), int(pass_index)])
    return np.random.default_rng(ss).random(shape) >= p


def dropout(
    x: Tensor,
    spec: DropoutSpec,
    mode: str,
    step: int,
    pass_index: int | Sequence[int],
    seed: int = 0,
) -> Tensor:
    """Inverted dropout.

    Masks are live in both ``train`` and ``mc_eval``; only ``deterministic``
    turns them off.  A sequence of pass indices means ``x`` holds that many
    equal row-blocks stacked together, each getting the mask of its own pass.
    """
    if mode not in _MODES:
        raise ValueError(f"unknown dropout mode {mode!r}")
    if mode == DETERMINISTIC or spec.p == 0.0:
        return x
    passes = [pass_index] if np.ndim(pass_index) == 0 else list(pass_index)
    rows, *rest = x.shape
    if rows % len(passes):
        raise ShapeError(f"{rows} rows cannot be split into {len(passes)} passes")
    block = (rows // len(passes), *rest)
    keep = np.concatenate(
        [dropout_mask(block, spec.p, seed, spec.rng_stream_id, step, t) for t in passes], axis=0
    )
    factor = keep / (1.0 - spec.p)
    return _make(x.data * factor, (x,), "dropout", lambda g: [(x, g * factor)])

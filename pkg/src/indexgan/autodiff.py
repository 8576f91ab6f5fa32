"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient the result keeps references to its parents and a closure that maps
the upstream gradient to per-parent contributions. :func:`backward` walks the
graph in reverse topological order and accumulates into the ``grad`` field of
leaf tensors that require gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible for an operator."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    out.grad = None
    return out


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), back)


# ---------------------------------------------------------------------------
# elementwise unary


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,))


class _KinkRecorder:
    """Collects leaky_relu pre-activations while active (used by grad_check)."""

    def __init__(self):
        self.inputs: list[np.ndarray] = []


_kink_recorder: _KinkRecorder | None = None


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if _kink_recorder is not None:
        _kink_recorder.inputs.append(x.data.copy())
    pos = x.data > 0
    y = np.where(pos, x.data, slope * x.data)
    return _make(y, (x,), lambda g: (np.where(pos, g, slope * g),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(y, (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    y = x.data[index]

    def back(g):
        full = np.zeros_like(x.data)
        if _is_basic_index(index):
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(y, dtype=np.float64), (x,), back)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in parts)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(
                f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=ax)

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(y, tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in tensors]}")
    y = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(y, tuple(tensors), back)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _make(y, (x,), lambda g: (_unbroadcast(g, x.shape),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for a (batch, in) input."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Repeated calls add to existing gradients; use :func:`zero_grad` to reset.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    kink_margin: float | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and must read the current values of ``params``.
    Entries whose perturbation moves any leaky_relu input to within
    ``kink_margin`` (default ``10 * step``) of zero, or across it, are skipped.
    """
    global _kink_recorder
    margin = 10 * step if kink_margin is None else kink_margin
    zero_grad(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]

    def evaluate():
        global _kink_recorder
        rec = _KinkRecorder()
        _kink_recorder = rec
        try:
            with no_grad():
                value = float(f().data)
        finally:
            _kink_recorder = None
        return value, rec.inputs

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp, kp = evaluate()
            flat[i] = orig - step
            fm, km = evaluate()
            flat[i] = orig
            if _near_kink(kp, km, margin):
                continue
            numeric = (fp - fm) / (2 * step)
            denom = max(np.abs(aflat[i]), np.abs(numeric), 1e-8)
            worst = max(worst, float(np.abs(aflat[i] - numeric) / denom))
    return worst


def _near_kink(plus: list[np.ndarray], minus: list[np.ndarray], margin: float) -> bool:
    for xp, xm in zip(plus, minus):
        moved = xp != xm
        if not moved.any():
            continue
        if np.any(np.sign(xp[moved]) != np.sign(xm[moved])):
            return True
        if np.any(np.minimum(np.abs(xp[moved]), np.abs(xm[moved])) < margin):
            return True
    return False


# ---------------------------------------------------------------------------
# optimizer


class RMSprop:
    """RMSprop with ``theta -= lr * g / (sqrt(v) + eps)``."""

    def __init__(self, params: Sequence[Tensor], lr: float, rho: float = 0.9, eps: float = 1e-8):
        if not 0.0 < rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {rho}")
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.state = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.state):
            g = p.grad
            if g is None:
                continue
            rmsprop_update(p.data, g, v, self.lr, self.rho, self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)


def rmsprop_update(theta: np.ndarray, g: np.ndarray, v: np.ndarray, lr: float,
                   rho: float = 0.9, eps: float = 1e-8) -> None:
    """In-place update of ``theta`` and its accumulator ``v``."""
    v *= rho
    v += (1.0 - rho) * g * g
    theta -= lr * g / (np.sqrt(v) + eps)


# ---------------------------------------------------------------------------
# batch normalisation


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, state: BatchNormState,
              train: bool) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"batchnorm: expected (batch, features), got {x.shape}")
    if train:
        if x.shape[0] < 2:
            raise ValueError("batchnorm: train mode needs a batch of at least 2 rows")
        mu = mean(x, axis=0, keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axis=0, keepdims=True)
        inv = _inv_sqrt(add(var, state.eps))
        normed = mul(centered, inv)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.data.reshape(-1)
        state.running_var = (1 - m) * state.running_var + m * var.data.reshape(-1)
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        normed = mul(sub(x, state.running_mean), inv)
    return add(mul(normed, scale), shift)


def _inv_sqrt(x: Tensor) -> Tensor:
    y = 1.0 / np.sqrt(x.data)
    return _make(y, (x,), lambda g: (-0.5 * g * y ** 3,))

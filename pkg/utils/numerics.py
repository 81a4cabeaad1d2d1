"""Float64 tensors with a recorded operation tape for reverse-mode gradients.

Every op returns a new `Tensor`. While a `Tape` is active in the current
context, each op appends its output to the tape; `Tape.gradients` then walks the
tape backwards, which is a valid topological order because parents are always
created before their children.
"""

import contextvars
import logging
from collections.abc import Callable, Iterable

import numpy as np

from utils.config import GRADCHECK_STEP, INIT_STD, LAYER_NORM_EPS
from utils.errors import ShapeError, StateError

logger = logging.getLogger("dflat_numerics")

DTYPE = np.float64

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dflat_active_tape", default=None
)


class Tensor:
    __slots__ = ("data", "name", "_parents", "_backward")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        # set only on leaves bound to a ParameterStore slot
        self.name = name
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Callable | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def reshape(self, *dims) -> "Tensor":
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return reshape(self, dims)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}{label})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None:
        out._parents = parents
        out._backward = backward
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, dims: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(dims):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(dims):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Records ops created inside its `with` block, for one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def gradients(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Return d(loss)/d(parameter) for every named leaf reached from `loss`."""
        if not self.nodes:
            raise StateError("backward called before any forward pass was recorded")
        if loss._backward is None:
            raise StateError("loss was not produced by a recorded computation")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got dims {loss.dims}")

        pending = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[str, np.ndarray] = {}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None:
                    continue
                if parent._backward is None:
                    if parent.name is not None:
                        if parent.name in leaf_grads:
                            leaf_grads[parent.name] = leaf_grads[parent.name] + parent_grad
                        else:
                            leaf_grads[parent.name] = np.array(parent_grad, dtype=DTYPE)
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad
        return leaf_grads

    def backward(self, loss: Tensor, store: "ParameterStore") -> dict[str, np.ndarray]:
        grads = self.gradients(loss)
        store.accumulate(grads)
        return grads


# ---------------------------------------------------------------- ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.dims), _unbroadcast(g, b.dims)

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.dims), _unbroadcast(g * a.data, b.dims)

    return _record(out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g):
        return (g * factor,)

    return _record(x.data * factor, (x,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.dims} and {b.dims}")
    if a.dims[1] != b.dims[0]:
        raise ShapeError(
            f"matmul inner dims disagree: left {a.dims[0]}x{a.dims[1]}, right {b.dims[0]}x{b.dims[1]}"
        )

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record(np.transpose(x.data, axes), (x,), backward)


def reshape(x: Tensor, dims) -> Tensor:
    dims = tuple(dims)
    if int(np.prod(dims)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.dims} into {dims}")
    source = x.dims

    def backward(g):
        return (g.reshape(source),)

    return _record(x.data.reshape(dims), (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.dims[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"cannot concatenate {[t.dims for t in tensors]} on axis {axis}") from e
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), backward)


def select(x: Tensor, key) -> Tensor:
    """Index `x` with a basic or integer-array key (x[key])."""
    source = x.dims

    def backward(g):
        grad = np.zeros(source, dtype=DTYPE)
        np.add.at(grad, key, g)
        return (grad,)

    return _record(x.data[key], (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def backward(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _record(probs, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.dims[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs at least 2 channels, got {d}")
    if gain.dims != (d,) or bias.dims != (d,):
        raise ShapeError(f"layer_norm gain/bias dims {gain.dims}/{bias.dims} do not match d={d}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def backward(g):
        g_normed = g * gain.data
        g_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return (
            g_x,
            (flat_g * normed.reshape(-1, d)).sum(axis=0),
            flat_g.sum(axis=0),
        )

    return _record(normed * gain.data + bias.data, (x, gain, bias), backward)


def sum_all(x: Tensor) -> Tensor:
    source = x.dims

    def backward(g):
        return (np.broadcast_to(g, source).copy(),)

    return _record(np.asarray(x.data.sum()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `targets` under row-wise softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x C logits, got {logits.dims}")
    targets = np.asarray(targets, dtype=np.int64).ravel()
    n = logits.dims[0]
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} targets for {n} logit rows")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = -log_probs[rows, targets].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return _record(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------- parameters


class ParameterStore:
    """Named parameters with same-dims gradient buffers, drawn from one seeded stream."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def register(
        self,
        name: str,
        dims: tuple[int, ...],
        init: str = "normal",
        offset: np.ndarray | None = None,
    ) -> Tensor:
        if name in self.values:
            raise KeyError(f"parameter {name!r} already registered")
        dims = tuple(int(n) for n in dims)
        if init == "normal":
            value = self._rng.normal(0.0, INIT_STD, size=dims)
        elif init == "zeros":
            value = np.zeros(dims, dtype=DTYPE)
        elif init == "ones":
            value = np.ones(dims, dtype=DTYPE)
        else:
            raise ValueError(f"unknown init {init!r}")
        if offset is not None:
            value = value + offset
        self.values[name] = np.ascontiguousarray(value, dtype=DTYPE)
        self.grads[name] = np.zeros(dims, dtype=DTYPE)
        return self.param(name)

    def param(self, name: str) -> Tensor:
        # shares memory with the slot, so in-place updates are seen by later passes
        return Tensor(self.values[name], name=name)

    def names(self) -> list[str]:
        return list(self.values)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.values.values())

    def zero_grad(self) -> None:
        for grad in self.grads.values():
            grad.fill(0.0)

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            self.grads[name] += grad

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __len__(self) -> int:
        return len(self.values)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    store: ParameterStore,
    step: float = GRADCHECK_STEP,
    names: list[str] | None = None,
    grad_transform: Callable[[np.ndarray], np.ndarray] | None = None,
) -> dict[str, float]:
    """Worst relative error between analytic and central-difference gradients per parameter.

    The error for a parameter is max|a - n| / max(max|a|, max|n|, 1e-8).
    `grad_transform` is applied to every analytic gradient before comparison.
    """
    with Tape() as tape:
        loss = loss_fn()
    analytic = tape.gradients(loss)

    report = {}
    for name in names or store.names():
        value = store.values[name]
        grad = analytic.get(name, np.zeros_like(value))
        if grad_transform is not None:
            grad = grad_transform(grad)
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = loss_fn().item()
            flat[i] = original - step
            minus = loss_fn().item()
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * step)
        denom = max(np.abs(grad).max(), np.abs(numeric).max(), 1e-8)
        report[name] = float(np.abs(grad - numeric).max() / denom)
        logger.debug("gradcheck %s rel_err=%.3e", name, report[name])
    return report

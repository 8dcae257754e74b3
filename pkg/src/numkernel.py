"""
Minimal dense-numeric substrate with tape-based reverse-mode gradients.

Tensors wrap float64 numpy arrays. Every primitive applied while a Tape is
active appends one entry to it; backward() replays the tape in reverse and
accumulates gradients into the trainable entries of a ParamSet.
"""
import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """Raised when a value that must be finite is not."""


class Tensor:
    """Dense float64 array with an optional trainable flag."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=DTYPE)
        if array.ndim == 0:
            array = array.reshape(())
        self.data = array
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{label})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=DTYPE))


# ---------------------------------------------------------------------------
# Computation record
# ---------------------------------------------------------------------------

@dataclass
class TapeEntry:
    """One primitive application: inputs, output and its vector-Jacobian product."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)


class Tape:
    """
    Ordered record of the primitives applied during a forward pass.

    Use as a context manager; primitives executed inside the block are
    recorded. Outside any tape nothing is recorded (inference mode).
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def replay(self) -> Iterator[TapeEntry]:
        """Yield every entry exactly once, last recorded first."""
        for index in range(len(self.entries) - 1, -1, -1):
            yield self.entries[index]

    def ops(self, name: str) -> List[TapeEntry]:
        return [entry for entry in self.entries if entry.op == name]


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def _emit(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = np.asarray(out, dtype=DTYPE)
    result.requires_grad = False
    result.name = None
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(TapeEntry(op=op, inputs=inputs, output=result, vjp=vjp))
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {list(a.shape)} and {list(b.shape)}") from None


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, vjp)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, vjp)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, vjp)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, x.data, 0.0), vjp)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")

    def vjp(g):
        return (g / x.data,)

    return _emit("log", (x,), np.log(x.data), vjp)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = as_tensor(x)

    def vjp(g):
        return (g * sigmoid(x.data),)

    return _emit("softplus", (x,), np.logaddexp(0.0, x.data), vjp)


def sigmoid(values: np.ndarray) -> np.ndarray:
    """Plain numpy logistic; used for decoding, not recorded."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(values, dtype=DTYPE)))


# ---------------------------------------------------------------------------
# Shape primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes, leading axes broadcast.

    The two-dimensional case is the plain [m,k] x [k,n] product.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}") from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), out, vjp)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got {list(x.shape)}")

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _emit("transpose", (x,), np.swapaxes(x.data, -1, -2).copy(), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    original = x.shape

    def vjp(g):
        return (g.reshape(original),)

    return _emit("reshape", (x,), x.data.reshape(tuple(shape)).copy(), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[list(t.shape) for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", tensors, out, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: mismatched shapes {[list(t.shape) for t in tensors]}") from None

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit("stack", tensors, out, vjp)


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of `x` along axis 0; the result has shape indices.shape + x.shape[1:]."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take: index out of range for axis of length {x.shape[0]}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("take", (x,), x.data[idx], vjp)


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), np.asarray(out, dtype=DTYPE), vjp)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {list(x.shape)}")
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _emit("mean", (x,), np.asarray(out, dtype=DTYPE), vjp)


# ---------------------------------------------------------------------------
# Normalising primitives
# ---------------------------------------------------------------------------

def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """
    Softmax restricted to entries where `mask` is true; masked entries are exactly 0.

    The mask broadcasts against x. Max-subtraction is always applied.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis of shape {list(x.shape)}")
    allowed = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(allowed.any(axis=axis)):
        raise ShapeError("softmax: a slice has no unmasked entries")
    peak = np.max(np.where(allowed, x.data, -np.inf), axis=axis, keepdims=True)
    exps = np.where(allowed, np.exp(np.where(allowed, x.data - peak, 0.0)), 0.0)
    out = exps / exps.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), out, vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis of shape {list(x.shape)}")
    return masked_softmax(x, np.ones(x.shape, dtype=bool), axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax over an empty axis of shape {list(x.shape)}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), out, vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each last-axis slice (population variance), then scale and shift."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            f"layer_norm: gamma {list(gamma.shape)} / beta {list(beta.shape)} must match last axis {width}"
        )
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centred * inv_std
    out = normed * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        g_normed = g * gamma.data
        gx = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        return gx, (g * normed).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gamma, beta), out, vjp)


def attention(q: Tensor, k: Tensor, v: Tensor, scaled: bool = True) -> Tensor:
    """softmax(q kᵀ / s) v with s = √d when scaled, else 1."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query {list(q.shape)} and key {list(k.shape)} feature sizes differ")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: key {list(k.shape)} and value {list(v.shape)} lengths differ")
    logits = matmul(q, transpose(k))
    if scaled:
        logits = mul(logits, 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(logits, axis=-1), v)


# ---------------------------------------------------------------------------
# Parameters and gradients
# ---------------------------------------------------------------------------

class ParamSet:
    """Named trainable tensors with one gradient buffer per parameter."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._grads: Dict[str, np.ndarray] = {}
        self._trainable: Dict[str, bool] = {}

    def add(self, name: str, data: ArrayLike, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already defined")
        tensor = Tensor(data, requires_grad=trainable, name=name)
        self._params[name] = tensor
        self._grads[name] = np.zeros_like(tensor.data)
        self._trainable[name] = trainable
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: Optional[str] = None) -> List[str]:
        if prefix is None:
            return list(self._params)
        return [name for name in self._params if name == prefix or name.startswith(prefix + ".")]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, prefix: str, trainable: bool) -> None:
        for name in self.names(prefix):
            self._trainable[name] = trainable
            self._params[name].requires_grad = trainable

    def trainable_names(self) -> List[str]:
        return [name for name in self._params if self._trainable[name]]

    def zero_grad(self) -> None:
        for name in self._grads:
            self._grads[name].fill(0.0)

    def blocks(self) -> Dict[str, List[str]]:
        """Group parameter names by their leading dotted component."""
        grouped: Dict[str, List[str]] = {}
        for name in self._params:
            grouped.setdefault(name.split(".", 1)[0], []).append(name)
        return grouped

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self._params.items()}

    def load_state(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy arrays into matching parameters; returns the names loaded."""
        loaded = []
        for name, array in state.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unknown parameter {name!r}")
                continue
            target = self._params[name]
            if target.shape != np.shape(array):
                raise ShapeError(f"parameter {name!r}: stored {list(np.shape(array))} vs {list(target.shape)}")
            target.data[...] = array
            loaded.append(name)
        if strict:
            missing = set(self._params) - set(state)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)}")
        return loaded

    def copy(self) -> "ParamSet":
        clone = ParamSet()
        for name, tensor in self._params.items():
            clone.add(name, tensor.data.copy(), trainable=self._trainable[name])
            clone._grads[name][...] = self._grads[name]
        return clone


def backward(loss: Tensor, tape: Tape, params: ParamSet) -> None:
    """
    Accumulate ∂loss/∂param into every trainable parameter's gradient buffer.

    Repeated calls without zero_grad() add up.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in tape.replay():
        upstream = pending.pop(id(entry.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(entry.inputs, entry.vjp(upstream)):
            if grad is None:
                continue
            key = id(tensor)
            if key in pending:
                pending[key] = pending[key] + grad
            else:
                pending[key] = grad
    for name in params.trainable_names():
        grad = pending.get(id(params[name]))
        if grad is not None:
            params.grad(name)[...] += grad


def finite_diff_grad(
    f: Callable[[ParamSet], float],
    params: ParamSet,
    h: float = 1e-5,
    names: Optional[Sequence[str]] = None,
) -> Dict[str, np.ndarray]:
    """Central-difference estimate (f(p+h) - f(p-h)) / 2h for every scalar entry."""
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    estimates: Dict[str, np.ndarray] = {}
    for name in names if names is not None else params.names():
        values = params[name].data
        estimate = np.zeros_like(values)
        for index in np.ndindex(values.shape):
            original = values[index]
            values[index] = original + h
            upper = float(f(params))
            values[index] = original - h
            lower = float(f(params))
            values[index] = original
            if not (math.isfinite(upper) and math.isfinite(lower)):
                raise NonFiniteError(f"objective is not finite while perturbing {name}{list(index)}")
            estimate[index] = (upper - lower) / (2.0 * h)
        estimates[name] = estimate
    return estimates


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """‖a − n‖ / max(‖a‖, ‖n‖, floor); the floor makes near-zero gradients compare absolutely."""
    a = np.asarray(analytic, dtype=DTYPE).ravel()
    n = np.asarray(numeric, dtype=DTYPE).ravel()
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), floor)
    return float(np.linalg.norm(a - n)) / scale

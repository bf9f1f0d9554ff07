# modules/tensor.py
"""Dense float64 arrays with reverse-mode differentiation.

Every value is a ``Tensor`` wrapping a read-only numpy array. Operations
record their parents and a closure mapping the upstream gradient to parent
gradients; ``backward`` walks the graph once in reverse topological order.
Leading axes broadcast like numpy, so the same code serves one sample or a
stacked minibatch.
"""
import threading
import weakref
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from modules.errors import ContractError, DimensionError

EPS: float = 1e-12
DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class MemoryTracker:
    """High-water mark of bytes held by live Tensor buffers."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.current: int = 0
        self.peak: int = 0

    def acquire(self, nbytes: int) -> None:
        with self._lock:
            self.current += nbytes
            if self.current > self.peak:
                self.peak = self.current

    def release(self, nbytes: int) -> None:
        with self._lock:
            self.current -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.current


TRACKER = MemoryTracker()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = "",
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[BackwardFn] = None,
                 _copy: bool = True) -> None:
        arr = np.array(data, dtype=DTYPE) if _copy else data
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        TRACKER.acquire(arr.nbytes)
        weakref.finalize(self, TRACKER.release, arr.nbytes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, _copy=False)

    def assign(self, value: np.ndarray) -> None:
        """Replace a leaf's value in place (optimizer steps, loading)."""
        if not self.is_leaf:
            raise ContractError("only leaf tensors can be reassigned")
        arr = np.array(value, dtype=DTYPE)
        if arr.shape != self.data.shape:
            raise DimensionError("assign", self.data.shape, arr.shape)
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data: ArrayLike, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    arr = np.asarray(data, dtype=DTYPE)
    if not arr.flags.c_contiguous or not arr.flags.owndata:
        arr = arr.copy()
    return Tensor(arr, _parents=parents, _backward=backward, _copy=False)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape)


# ---------------------------------------------------------------- elementwise

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


hadamard = mul


def scale(a: ArrayLike, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def diag_scale(d: ArrayLike, a: ArrayLike) -> Tensor:
    """diag(d) @ a for a column vector d of shape (..., N, 1)."""
    d, a = as_tensor(d), as_tensor(a)
    if d.shape[-1] != 1 or d.shape[-2] != a.shape[-2]:
        raise DimensionError("diag_scale", d.shape, a.shape)
    return mul(d, a)


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    return _node(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _node(e, (a,), lambda g: (g * e,))


def reciprocal(a: ArrayLike, eps: float = EPS) -> Tensor:
    """1 / max(a, eps); the gradient is zero where the floor is active."""
    a = as_tensor(a)
    active = a.data > eps
    denom = np.where(active, a.data, eps)
    out = 1.0 / denom
    return _node(out, (a,), lambda g: (np.where(active, -g * out * out, 0.0),))


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    take_a = a.data <= b.data
    return _node(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(take_a, 0.0, g), b.shape)))


# ------------------------------------------------------------------ reductions

def sum_all(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_rows(a: ArrayLike) -> Tensor:
    """Sum over the last axis, keeping it as a column of width 1."""
    a = as_tensor(a)
    return _node(a.data.sum(axis=-1, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sq_norm_rows(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _node((a.data * a.data).sum(axis=-1, keepdims=True), (a,),
                 lambda g: (2.0 * g * a.data,))


def row_norm(a: ArrayLike, eps: float = EPS) -> Tensor:
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    safe = np.where(n > eps, n, 1.0)
    return _node(n, (a,), lambda g: (np.where(n > eps, g * a.data / safe, 0.0),))


def min_matrix(a: ArrayLike) -> Tensor:
    """Minimum over the last two axes, kept as a (..., 1, 1) block per leading index."""
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise DimensionError("min_matrix", a.shape, ("...", "n", "m"))
    lead = a.shape[:-2]
    flat = a.data.reshape(lead + (-1,))
    idx = np.argmin(flat, axis=-1)[..., None]

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros_like(flat)
        np.put_along_axis(out, idx, np.asarray(g).reshape(lead + (1,)), axis=-1)
        return (out.reshape(a.shape),)

    return _node(np.take_along_axis(flat, idx, axis=-1).reshape(lead + (1, 1)), (a,), backward)


def rowwise_l2_normalize(a: ArrayLike, eps: float = EPS) -> Tensor:
    """Divide each row by max(||row||, eps)."""
    if eps <= 0:
        raise ContractError(f"rowwise_l2_normalize needs eps > 0, got {eps}")
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    active = n > eps
    d = np.where(active, n, eps)
    y = a.data / d

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        projected = g - y * (g * y).sum(axis=-1, keepdims=True)
        return (np.where(active, projected, g) / d,)

    return _node(y, (a,), backward)


# ----------------------------------------------------------------- structural

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError("matmul", a.shape, b.shape)

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward)


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError("broadcast_to", a.shape, shape)
    return _node(out.copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(parts: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    """Concatenate along the feature axis; leading axes broadcast."""
    tensors = [as_tensor(p) for p in parts]
    lead = np.broadcast_shapes(*[t.shape[:-1] for t in tensors]) if tensors else ()
    if axis not in (-1, len(lead)):
        raise ContractError("concat only joins the last axis")
    arrays = [np.broadcast_to(t.data, lead + t.shape[-1:]) for t in tensors]
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def backward(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(_unbroadcast(g[..., bounds[i]:bounds[i + 1]], t.shape) for i, t in enumerate(tensors))

    return _node(np.concatenate(arrays, axis=-1), tuple(tensors), backward)


def take_cols(a: ArrayLike, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros(a.shape)
        out[..., start:stop] = g
        return (out,)

    return _node(a.data[..., start:stop], (a,), backward)


# ------------------------------------------------------------------- backward

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Reverse-mode sweep seeded with 1; returns gradients of every leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


# --------------------------------------------------------- gradient checking

def finite_difference(fn: Callable[[], float], value: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of fn() w.r.t. the entries of a writable array."""
    grad = np.zeros_like(value)
    it = np.nditer(value, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = value[idx]
        value[idx] = orig + step
        plus = fn()
        value[idx] = orig - step
        minus = fn()
        value[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    scale_ = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / scale_


def gradient_check(build_loss: Callable[[Dict[str, Tensor]], Tensor], values: Dict[str, np.ndarray],
                   step: float = 1e-5) -> Dict[str, float]:
    """Compare analytic and central-difference gradients per named input.

    ``values`` holds writable arrays; ``build_loss`` receives fresh leaf
    tensors built from them and returns a scalar Tensor.
    """
    leaves = {k: parameter(v, name=k) for k, v in values.items()}
    backward(build_loss(leaves))
    errors: Dict[str, float] = {}
    for key, value in values.items():
        def evaluate() -> float:
            return float(build_loss({k: Tensor(v) for k, v in values.items()}).data)
        analytic = leaves[key].grad if leaves[key].grad is not None else np.zeros_like(value)
        errors[key] = relative_error(analytic, finite_difference(evaluate, value, step))
    return errors

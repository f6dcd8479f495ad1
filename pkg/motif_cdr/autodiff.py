"""
Dense float64 tensors with reverse-mode gradients.

Every op records its parents and a closure that pushes the output gradient back
into them; `Tensor.backward` walks the graph in reverse topological order.
"""
import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, NumericalError, SimilarityError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

LAYER_NORM_EPS = 1e-5

# Graph recording is switched per thread
_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (inference and frozen-encoder caching)."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- basics ---------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + grad

    def backward(self, grad: Optional[ArrayLike] = None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)

        order: List[Tensor] = []
        visited: Set[int] = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __getitem__(self, key): return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    needs_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if not needs_grad:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_pair(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))
    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product (with broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))
    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "div")
    if np.any(b.data == 0):
        raise NumericalError("division by zero")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data ** 2), b.shape))
    return _result(a.data / b.data, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))
    return _result(a.data ** exponent, (a,), backward, "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)
    return _result(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalError("log of a non-positive value")

    def backward(g):
        a._accumulate(g / a.data)
    return _result(np.log(a.data), (a,), backward, "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out ** 2))
    return _result(out, (a,), backward, "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner))
    return _result(out, (a,), backward, "gelu")


# -- reductions and shape ops ----------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())
    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    if count == 0:
        raise DimensionError("mean over an empty axis")
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


def mean_rows(a) -> Tensor:
    """Column-wise mean over the row axis (second to last)."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-2] == 0:
        raise DimensionError(f"mean_rows needs at least one row, got shape {a.shape}")
    return mean(a, axis=-2)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None

    def backward(g):
        a._accumulate(g.reshape(a.shape))
    return _result(out, (a,), backward, "reshape")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 dimensions, got {a.shape}")

    def backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))
    return _result(np.swapaxes(a.data, -1, -2), (a,), backward, "transpose")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.transpose(g, inverse))
    return _result(np.transpose(a.data, axes), (a,), backward, "permute")


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a._accumulate(full)
    return _result(np.array(out), (a,), backward, "getitem")


def take(a, indices) -> Tensor:
    """Gather rows by index (any index shape); repeated indices accumulate gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise DimensionError(f"take: index out of range for {a.shape[0]} rows")
    out = a.data[indices]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        a._accumulate(full)
    return _result(out, (a,), backward, "take")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(int(start), int(stop))
                t._accumulate(g[tuple(index)])
    return _result(out, tensors, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- linear algebra ------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; a 2-D right operand broadcasts over batches."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: {e}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
    return _result(out, (a, b), backward, "matmul")


def spmm(matrix: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense 2-D tensor."""
    x = as_tensor(x)
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise DimensionError(f"spmm: sparse {matrix.shape} @ dense {x.shape}")
    matrix = sp.csr_matrix(matrix)
    matrix_t = sp.csr_matrix(matrix.T)

    def backward(g):
        x._accumulate(np.asarray(matrix_t @ g))
    return _result(np.asarray(matrix @ x.data), (x,), backward, "spmm")


# -- normalizations and similarities ---------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return _result(out, (a,), backward, "softmax")


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    peak = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - peak)
    total = e.sum(axis=axis, keepdims=True)
    out = (np.log(total) + peak).squeeze(axis)
    weights = e / total

    def backward(g):
        a._accumulate(np.expand_dims(g, axis) * weights)
    return _result(out, (a,), backward, "logsumexp")


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale by `gain` and shift by `bias`."""
    x = as_tensor(x)
    centered = x - mean(x, axis=-1, keepdims=True)
    variance = mean(centered * centered, axis=-1, keepdims=True)
    return centered * power(variance + eps, -0.5) * gain + bias


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along `axis`, broadcasting the remaining axes."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "cosine_similarity")
    norm_a = np.sqrt((a.data * a.data).sum(axis=axis))
    norm_b = np.sqrt((b.data * b.data).sum(axis=axis))
    if np.any(norm_a == 0) or np.any(norm_b == 0):
        raise SimilarityError("cosine similarity of a zero-norm embedding")
    dot = tsum(a * b, axis=axis)
    norms = power(tsum(a * a, axis=axis), 0.5) * power(tsum(b * b, axis=axis), 0.5)
    return dot / norms


# -- parameters ------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors with a freeze mask."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self.frozen: Set[str] = set()

    def add(self, name: str, value: ArrayLike) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        tensor = Tensor(value, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return sorted(self._params)

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(name, self._params[name]) for name in self.names()]

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(name, t) for name, t in self.items() if name not in self.frozen]

    def freeze(self, names: Iterable[str]):
        for name in names:
            if name not in self._params:
                raise KeyError(f"cannot freeze unknown parameter {name!r}")
            self.frozen.add(name)

    def freeze_all_except(self, keep: Callable[[str], bool]):
        self.frozen = {name for name in self._params if not keep(name)}

    def unfreeze_all(self):
        self.frozen = set()

    def zero_grad(self):
        for tensor in self._params.values():
            tensor.grad = None

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, tensor in self._params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise DimensionError(f"parameter {name!r}: shape {value.shape} != {tensor.shape}")
            tensor.data = value.copy()


def sgd_step(store: ParamStore, lr: float) -> ParamStore:
    """Plain gradient descent on unfrozen tensors; every gradient is cleared afterwards."""
    for name, tensor in store.trainable():
        if tensor.grad is not None and lr != 0:
            tensor.data = tensor.data - lr * tensor.grad
    store.zero_grad()
    return store


class SGD:
    def __init__(self, store: ParamStore, lr: float):
        self.store = store
        self.lr = lr

    def step(self):
        sgd_step(self.store, self.lr)


class Adam:
    def __init__(self, store: ParamStore, lr: float, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self._t = 0

    def step(self):
        self._t += 1
        for name, tensor in self.store.trainable():
            if tensor.grad is None:
                continue
            g = tensor.grad
            m = self._m.get(name, np.zeros_like(g))
            v = self._v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self._t)
            v_hat = v / (1 - self.beta2 ** self._t)
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.store.zero_grad()


def make_optimizer(name: str, store: ParamStore, lr: float):
    if name == "sgd":
        return SGD(store, lr)
    if name == "adam":
        return Adam(store, lr)
    raise ValueError(f"unknown optimizer {name!r}")


# -- gradient checking -----------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Union[ParamStore, Sequence[Tensor]], h: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """
    Largest relative gap between reverse-mode and central-difference gradients.

    `f` must rebuild its computation from the current parameter values on every
    call. Frozen tensors of a ParamStore are skipped. With `max_coords`, at most
    that many coordinates per tensor are probed (chosen with `seed`).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if isinstance(params, ParamStore):
        tensors = [t for _, t in params.trainable()]
        params.zero_grad()
    else:
        tensors = list(params)
        for t in tensors:
            t.grad = None

    loss = f()
    if not np.isfinite(loss.item()):
        raise NumericalError(f"grad_check aborted: f is not finite ({loss.item()})")
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor, grad in zip(tensors, analytic):
        flat_size = tensor.data.size
        coords = np.arange(flat_size)
        if max_coords is not None and flat_size > max_coords:
            coords = np.sort(rng.choice(flat_size, size=max_coords, replace=False))
        for flat in coords:
            idx = np.unravel_index(flat, tensor.shape)
            original = tensor.data[idx]
            tensor.data[idx] = original + h
            f_plus = f().item()
            tensor.data[idx] = original - h
            f_minus = f().item()
            tensor.data[idx] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError(f"grad_check aborted: non-finite f near {tensor.name or 'tensor'}{idx}")
            numeric = (f_plus - f_minus) / (2 * h)
            gap = abs(grad[idx] - numeric) / max(abs(grad[idx]) + abs(numeric), 1e-3)
            worst = max(worst, gap)
    for t in tensors:
        t.grad = None
    return worst

"""
Small dense-tensor engine with reverse-mode differentiation on top of numpy,
plus a parameter store and an adaptive-moment optimizer.

Every op checks its result for NaN/Inf and records a backward rule when any
input requires a gradient.
"""

import logging
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from services.errors import NonFiniteValue, NotScalarLoss, ShapeMismatch

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data) if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"{op} produced non-finite values")


_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording backward rules (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, op: str, fn):
    a, b = as_tensor(a), as_tensor(b)
    try:
        return a, b, fn(a.data, b.data)
    except ValueError as e:
        raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


def add(a, b) -> Tensor:
    a, b, data = _binary(a, b, "add", np.add)

    def backward(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(g, b.shape))

    return _result(data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b, data = _binary(a, b, "sub", np.subtract)

    def backward(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(-g, b.shape))

    return _result(data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b, data = _binary(a, b, "mul", np.multiply)

    def backward(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(g * a.data, b.shape))

    return _result(data, "mul", (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * c)

    return _result(a.data * c, "scale", (a,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(data, "matmul", (a, b), backward)


def affine(x, W, b=None) -> Tensor:
    """x @ W + b along the last axis of x."""
    y = matmul(x, W)
    return add(y, b) if b is not None else y


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no learned gain)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        x._accumulate(inv * (g - gm - y * gy))

    return _result(y, "layer_norm", (x,), backward)


def silu(x) -> Tensor:
    """Sigmoid-weighted linear unit x * sigmoid(x)."""
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        x._accumulate(g * (s + x.data * s * (1.0 - s)))

    return _result(x.data * s, "silu", (x,), backward)


smooth_nonlinearity = silu


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in ts]}") from e
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _result(data, "concat", ts, backward)


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data[index]
    except IndexError as e:
        raise ShapeMismatch(f"slice {index!r} out of range for shape {x.shape}") from e

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _result(np.array(data), "slice", (x,), backward)


def reshape(x, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}") from e

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(data, "reshape", (x,), backward)


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), "transpose", (x,), backward)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _result(np.asarray(data), "sum", (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def mse(x, y) -> Tensor:
    """Mean squared error over all elements; a scalar tensor."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeMismatch(f"mse: shapes differ {x.shape} vs {y.shape}")
    d = sub(x, y)
    return mean(mul(d, d))


def _topological(root: Tensor) -> List[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


class ParamStore:
    """Named trainable parameters with gradients and optimizer moments."""

    def __init__(self, dtype=np.float64):
        self.dtype = dtype
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> List[str]:
        return list(self.params)

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def clip_grad_norm(self, max_norm: float) -> float:
        """Rescale all gradients so their global norm is at most max_norm; returns the pre-clip norm."""
        norm = self.grad_norm()
        if norm > max_norm > 0:
            factor = max_norm / (norm + 1e-12)
            for t in self.params.values():
                if t.grad is not None:
                    t.grad *= factor
        return norm

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {f"param/{k}": t.data for k, t in self.params.items()}
        out.update({f"adam/m/{k}": v for k, v in self.m.items()})
        out.update({f"adam/v/{k}": v for k, v in self.v.items()})
        out["adam/step"] = np.array([self.step], dtype=np.int64)
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            value = state[f"param/{k}"]
            if value.shape != t.shape:
                raise ShapeMismatch(f"parameter '{k}' has shape {value.shape}, expected {t.shape}")
            t.data = np.array(value, dtype=self.dtype)
        self.m = {k[len("adam/m/"):]: np.array(v) for k, v in state.items() if k.startswith("adam/m/")}
        self.v = {k[len("adam/v/"):]: np.array(v) for k, v in state.items() if k.startswith("adam/v/")}
        if "adam/step" in state:
            self.step = int(state["adam/step"][0])


def backward(loss: Tensor, store: Optional[ParamStore] = None) -> None:
    """
    Reverse-mode sweep from a scalar loss.

    Parameters of `store` that the loss does not reach end with zero gradients.

    Raises:
        NotScalarLoss: loss has more than one element
    """
    if loss.data.size != 1:
        raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if store is not None:
        store.zero_grad()
    order = _topological(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


@dataclass
class Adam:
    """Bias-corrected adaptive-moment optimizer."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, store: ParamStore) -> None:
        optimizer_step(store, self.lr, self.beta1, self.beta2, self.eps)


def optimizer_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update of every parameter in the store, in place."""
    store.step += 1
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    for name, t in store.params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        m = store.m.get(name)
        v = store.v.get(name)
        m = beta1 * m + (1.0 - beta1) * g if m is not None else (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g if v is not None else (1.0 - beta2) * g * g
        store.m[name], store.v[name] = m, v
        t.data = t.data - (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(t.data.dtype)


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-4,
    floor: float = 1e-5,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare reverse-mode gradients with central finite differences.

    Args:
        fn: builds the scalar loss from the current parameter values
        params: tensors to perturb (must require grad)
        eps: finite-difference step
        floor: magnitude floor of the relative-error denominator
        max_elements: check at most this many entries per tensor (random subset)
        rng: generator for the subset choice

    Returns:
        the maximum relative error over every checked entry
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(fn())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = float(ga.reshape(-1)[i])
            err = abs(num - ana) / max(abs(num), abs(ana), floor)
            worst = max(worst, err)
    return worst

"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. `backward` walks the recorded graph in reverse topological
order and accumulates into the `grad` buffer of every tensor that requires
gradients. Nothing here knows about models; the rest of the package builds on
these primitives.
"""
import hashlib
import logging
import os
import zlib
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from models import AlignCapError, PreconditionError

logger = logging.getLogger("aligncap")


class ShapeError(AlignCapError):
    """Operand shapes are incompatible."""
    pass

class RankError(AlignCapError):
    """backward() was called on a non-scalar tensor."""
    pass

class EmptyDimensionError(AlignCapError):
    pass

class InvalidProbabilityError(AlignCapError):
    pass

class NonFiniteError(AlignCapError):
    """Debug mode found NaN/Inf in the output of an op."""
    pass

class GradientCheckError(AlignCapError):
    pass


_debug_mode = os.environ.get("ALIGNCAP_LOG", "").lower() == "debug"

def set_debug_mode(enabled: bool):
    global _debug_mode
    _debug_mode = bool(enabled)
    logger.debug(f"Tensor debug mode set to {_debug_mode}")

def is_debug_mode() -> bool:
    return _debug_mode


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._grad_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    # operator sugar
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
    def __getitem__(self, key): return getitem(self, key)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class Parameter(Tensor):
    """A named model tensor; frozen parameters never receive gradients."""

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = bool(trainable)

    @property
    def tensor(self) -> Tensor:
        return self

    def sha256(self) -> str:
        buf = np.ascontiguousarray(self.data, dtype='<f8').tobytes()
        return hashlib.sha256(buf).hexdigest()


TensorLike = Union[Tensor, np.ndarray, float, int]

def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.name = None
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.grad = np.zeros_like(out.data)
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.grad = None
        out._parents = ()
        out._grad_fn = None
    if _debug_mode and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"Non-finite values produced by op '{op}' (shape {out.shape})")
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from e


# --- elementwise arithmetic -------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), grad_fn, "add")

def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), grad_fn, "sub")

def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), grad_fn, "mul")

def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(a.data / b.data, (a, b), grad_fn, "div")

def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")

def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid_np(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))

def sigmoid(x):
    if isinstance(x, Tensor):
        y = _sigmoid_np(x.data)
        return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")
    y = _sigmoid_np(x)
    return float(y) if np.ndim(y) == 0 else y

def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    def grad_fn(g):
        return (g * (s + x.data * s * (1.0 - s)),)
    return _make(x.data * s, (x,), grad_fn, "silu")

def _softplus_np(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

def softplus(x):
    """log(1 + exp(x)) computed as max(x,0) + log1p(exp(-|x|)).

    Floats map to floats; Tensors map to a differentiable Tensor.
    """
    if isinstance(x, Tensor):
        s = _sigmoid_np(x.data)
        return _make(_softplus_np(x.data), (x,), lambda g: (g * s,), "softplus")
    y = _softplus_np(x)
    return float(y) if np.ndim(y) == 0 else y


# --- shape ops --------------------------------------------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(np.matmul(a.data, b.data), (a, b), grad_fn, "matmul")

def transpose(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got shape {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from e
    return _make(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn, "sum")

def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / count)

def getitem(x: Tensor, key) -> Tensor:
    def grad_fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, key, g)
        return (out,)
    return _make(np.array(x.data[key]), (x,), grad_fn, "getitem")

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise PreconditionError("concat needs at least one tensor")
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    def grad_fn(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _make(y, tuple(tensors), grad_fn, "concat")

def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Embedding lookup: rows of a 2-D table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return _make(np.zeros((0, table.shape[1])), (table,), lambda g: (np.zeros_like(table.data),), "take_rows")
    return getitem(table, ids)


# --- normalization / activations -------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _make(y, (x,), grad_fn, "softmax")

def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    def grad_fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)
    return _make(y, (x,), grad_fn, "log_softmax")

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise EmptyDimensionError(f"layer_norm over an empty last dimension (shape {x.shape})")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim of {x.shape}")
    if eps <= 0:
        raise PreconditionError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centred * rstd
    y = xhat * gain.data + bias.data
    def grad_fn(g):
        dxhat = g * gain.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias
    return _make(y, (x, gain, bias), grad_fn, "layer_norm")

def dropout(x: Tensor, p: float, rng: "Rng", training: bool) -> Tensor:
    if not (0.0 <= p < 1.0):
        raise InvalidProbabilityError(f"dropout probability must lie in [0,1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.uniform(size=x.shape) >= p
    mask = keep.astype(np.float64) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# --- reverse mode -----------------------------------------------------------

def _topological_order(root: Tensor):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order

def backward(loss: Tensor):
    if loss.data.size != 1 or loss.ndim > 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward called on a loss that does not require grad; nothing to do")
        return
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        g = grads.get(id(node))
        if g is not None:
            node.grad = node.grad + g


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      max_coords: Optional[int] = None, rng: Optional["Rng"] = None,
                      analytic: Optional[np.ndarray] = None, per_tensor: bool = False) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be deterministic; dropout masks have to be replayed by the caller.
    When `analytic` is given the backward pass is skipped. With `max_coords`
    only that many coordinates (drawn from `rng`) are probed. `per_tensor`
    normalises every coordinate by the largest gradient magnitude of `x`
    instead of by its own magnitude.
    """
    if h <= 0:
        raise GradientCheckError(f"step h must be positive, got {h}")
    if not x.requires_grad:
        raise GradientCheckError("finite_diff_check needs a tensor with requires_grad=True")
    base = f(x)
    if base.data.size != 1:
        raise RankError(f"finite_diff_check needs a scalar function, got shape {base.shape}")
    if f(x).item() != base.item():
        raise GradientCheckError("function is not deterministic; freeze dropout masks and rng before checking")
    if analytic is None:
        saved = x.grad
        x.zero_grad()
        backward(f(x))
        analytic = x.grad.copy()
        x.grad = saved
    coords = list(np.ndindex(*x.shape)) if x.ndim else [()]
    if max_coords is not None and len(coords) > max_coords:
        picker = rng if rng is not None else Rng(0)
        chosen = picker.permutation(len(coords))[:max_coords]
        coords = [coords[i] for i in sorted(chosen)]
    pairs = []
    for idx in coords:
        original = x.data[idx]
        x.data[idx] = original + h
        f_plus = f(x).item()
        x.data[idx] = original - h
        f_minus = f(x).item()
        x.data[idx] = original
        pairs.append((float(analytic[idx]), (f_plus - f_minus) / (2.0 * h)))
    if per_tensor:
        scale = max([abs(n) for _, n in pairs] + [float(np.abs(analytic).max()), 1e-8])
        return max(abs(a - n) for a, n in pairs) / scale
    return max(abs(a - n) / max(abs(a), abs(n), 1e-8) for a, n in pairs)


# --- randomness -------------------------------------------------------------

def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))

class Rng:
    """Splittable generator over numpy's Philox-4x64 counter-based bit generator.

    The stream is a pure function of (seed, path); `child` derives independent
    sub-streams by extending the path with integer or string keys.
    """

    def __init__(self, seed: int, path: Iterable[int] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, *self.path])
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: Optional[int] = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"

"""Small parameterised building blocks shared by the trainable modules."""
from typing import Iterator, List, Optional

import numpy as np

from models import ConfigError
from modules.tensor import Parameter, Rng, Tensor, as_tensor, layer_norm, matmul, softmax, concat, transpose


class Component:
    """Anything that owns Parameters, directly or through child components.

    Parameters are discovered from instance attributes in definition order,
    which keeps checkpoint layouts stable across runs.
    """

    def parameters(self) -> List[Parameter]:
        found: List[Parameter] = []
        seen = set()
        for value in vars(self).values():
            for p in _collect(value):
                if id(p) not in seen:
                    seen.add(id(p))
                    found.append(p)
        return found

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def frozen_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if not p.trainable]

def _collect(value) -> Iterator[Parameter]:
    if isinstance(value, Parameter):
        yield value
    elif isinstance(value, Component):
        yield from value.parameters()
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _collect(item)


def fan_in_uniform(rng: Rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Component):
    def __init__(self, name: str, d_in: int, d_out: int, rng: Rng, trainable: bool = True,
                 zero_init: bool = False, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = fan_in_uniform(rng.child(name, "weight"), d_in, (d_in, d_out))
        self.weight = Parameter(f"{name}.weight", w, trainable)
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out), trainable) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(as_tensor(x), self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Component):
    def __init__(self, name: str, d: int, trainable: bool = True, eps: float = 1e-5):
        self.eps = eps
        self.gain = Parameter(f"{name}.gain", np.ones(d), trainable)
        self.bias = Parameter(f"{name}.bias", np.zeros(d), trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(q kᵀ / √d + mask) v for a single head."""
    scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + Tensor(mask)
    return matmul(softmax(scores), v)


class MultiHeadCrossAttention(Component):
    """Multi-head attention with separate query/key/value sources.

    Heads are column slices of the projected tokens; their outputs are
    concatenated and mixed by the output projection.
    """

    def __init__(self, name: str, d_model: int, num_heads: int, rng: Rng, d_kv: Optional[int] = None,
                 zero_out: bool = False, trainable: bool = True):
        if d_model % num_heads != 0:
            raise ConfigError(f"num_heads {num_heads} must divide d_model {d_model}")
        d_kv = d_model if d_kv is None else d_kv
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.w_q = Linear(f"{name}.w_q", d_model, d_model, rng, trainable)
        self.w_k = Linear(f"{name}.w_k", d_kv, d_model, rng, trainable)
        self.w_v = Linear(f"{name}.w_v", d_kv, d_model, rng, trainable)
        self.w_o = Linear(f"{name}.w_o", d_model, d_model, rng, trainable, zero_init=zero_out)

    def project_kv(self, key: Tensor, value: Tensor):
        return self.w_k(key), self.w_v(value)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, mask: Optional[np.ndarray] = None,
                 projected_kv=None) -> Tensor:
        q = self.w_q(query)
        k, v = projected_kv if projected_kv is not None else self.project_kv(key, value)
        if self.num_heads == 1:
            return self.w_o(attention(q, k, v, mask))
        heads = []
        for h in range(self.num_heads):
            cols = slice(h * self.head_dim, (h + 1) * self.head_dim)
            heads.append(attention(q[:, cols], k[:, cols], v[:, cols], mask))
        return self.w_o(concat(heads, axis=1))

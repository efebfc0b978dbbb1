"""Dense float64 tensor substrate and the learnable-block contract.

Every tensor in the package is a C-contiguous float64 ndarray. Learnable
blocks own :class:`Parameter` objects and implement a hand-written
vector-Jacobian product in ``backward``; there is no autodiff tape. The
finite-difference harness in :mod:`stgd.train` is the safety net for every
block registered here.

All matrix products go through :func:`matmul` so the benchmark module can
count multiply-accumulates with an instrumentation hook.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

Tensor = np.ndarray


def as_tensor(x) -> Tensor:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


def require_finite(x: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values", where=where)
    return x


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation (used by stgd.bench)

_MAC_COUNTS: dict[str, int] | None = None
_MAC_LABEL: list[str] = ["total"]


@contextlib.contextmanager
def count_macs(counts: dict[str, int]):
    """Route matmul MAC counts into ``counts`` for the duration of the block."""
    global _MAC_COUNTS
    prev = _MAC_COUNTS
    _MAC_COUNTS = counts
    try:
        yield counts
    finally:
        _MAC_COUNTS = prev


@contextlib.contextmanager
def mac_scope(label: str):
    """Attribute matmul MACs to ``label`` while active (nesting replaces)."""
    _MAC_LABEL.append(label)
    try:
        yield
    finally:
        _MAC_LABEL.pop()


def _record_macs(a_shape, b_shape):
    batch = 1
    for s in np.broadcast_shapes(a_shape[:-2], b_shape[:-2]):
        batch *= s
    macs = batch * a_shape[-2] * a_shape[-1] * b_shape[-1]
    _MAC_COUNTS[_MAC_LABEL[-1]] = _MAC_COUNTS.get(_MAC_LABEL[-1], 0) + macs


# ---------------------------------------------------------------------------
# operations

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with the standard trailing-two-axes contract.

    2-D inputs give the plain m×k @ k×n product; leading axes broadcast as
    a stack of matrices. Accumulation order is numpy's and fixed, so results
    are bit-identical across runs.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    if _MAC_COUNTS is not None:
        _record_macs(a.shape, b.shape)
    return np.matmul(a, b)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction.

    Raises :class:`NumericError` on non-finite input. Output rows are
    nonnegative and sum to 1 within 1e-12.
    """
    x = np.asarray(x)
    require_finite(x, "softmax_rows")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def linear_forward(x: Tensor, w: "Parameter", b: "Parameter | None" = None) -> Tensor:
    """Affine map over the trailing axis: x @ w.value + b.value."""
    x = np.asarray(x)
    wv = w.value
    if x.shape[-1] != wv.shape[0]:
        raise ShapeError(
            f"linear_forward: input dim {x.shape[-1]} != weight rows {wv.shape[0]}"
        )
    out = matmul(x.reshape(-1, x.shape[-1]), wv).reshape(x.shape[:-1] + (wv.shape[1],))
    if b is not None:
        out = out + b.value
    return out


# ---------------------------------------------------------------------------
# parameters

@dataclass
class Parameter:
    """A named learnable tensor with a paired gradient accumulator."""

    name: str
    value: Tensor
    grad: Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = as_tensor(self.grad)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"parameter {self.name}: grad shape != value shape")

    def zero_grad(self):
        self.grad[...] = 0.0


class ParameterStore:
    """Ordered registry of parameters with unique names."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def register(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ShapeError(f"duplicate parameter name: {param.name}")
        self._params[param.name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self):
        for p in self:
            p.zero_grad()

    def n_entries(self) -> int:
        return sum(p.value.size for p in self)


# ---------------------------------------------------------------------------
# learnable blocks

BLOCK_TYPES: dict[str, type] = {}


class Block:
    """Base class for blocks that own parameters directly.

    Subclasses append their parameters to ``self.parameters`` and implement
    ``backward`` as the exact vector-Jacobian product of their ``forward``,
    accumulating into each parameter's ``grad``. Every subclass must be
    covered by the gradient-check registry in :mod:`stgd.train`; the test
    suite enforces the mapping.
    """

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        BLOCK_TYPES[cls.__name__] = cls

    def __init__(self):
        self.parameters: list[Parameter] = []

    def _param(self, name: str, value: Tensor) -> Parameter:
        p = Parameter(name, value)
        self.parameters.append(p)
        return p


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Block):
    """y = x @ w + b over the trailing axis."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.w = self._param(f"{name}.w", glorot(rng, d_in, d_out))
        self.b = self._param(f"{name}.b", np.zeros(d_out)) if bias else None
        self._x: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        self._x = np.asarray(x)
        return linear_forward(x, self.w, self.b)

    def backward(self, g: Tensor) -> Tensor:
        x = self._x
        x2 = x.reshape(-1, x.shape[-1])
        g2 = np.asarray(g).reshape(-1, g.shape[-1])
        self.w.grad += matmul(x2.T, g2)
        if self.b is not None:
            self.b.grad += g2.sum(axis=0)
        return matmul(g2, self.w.value.T).reshape(x.shape)


class LayerNorm:
    """Parameter-free normalization over the trailing axis."""

    def __init__(self, eps: float = 1e-6):
        self.eps = eps
        self._y: Tensor | None = None
        self._inv: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._y = (x - mu) * self._inv
        return self._y

    def backward(self, g: Tensor) -> Tensor:
        y, inv = self._y, self._inv
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (g - gm - y * gym) * inv

"""Temporal kernels: full softmax attention, differential attention,
windowed ReLU linear attention, and FiLM conditioning.

Full attention is the quadratic baseline used for oracle comparisons and
scaling benchmarks. Differential attention subtracts two softmax maps with
a learnable per-head coefficient. The linear kernel rewrites the ReLU
weighted average so keys and values are aggregated before queries touch
them, making cost linear in sequence length; it runs on non-overlapping
windows.

All kernels accept (L, d) or batched (B, L, d) input; the batch axis is the
dancer axis in the denoiser. The block classes cache intermediates for the
hand-written backward passes; the plain functions are stateless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import Block, Parameter, Tensor, matmul, relu, softmax_rows
from .errors import ConfigError, ShapeError


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (L, d) or (B, L, d), got {x.shape}")


def _swap(x: Tensor) -> Tensor:
    return np.swapaxes(x, -1, -2)


def _softmax_vjp(a: Tensor, da: Tensor) -> Tensor:
    return a * (da - (da * a).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# full softmax attention

def softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / √d) v with d taken from the query width."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    a = softmax_rows(matmul(q, _swap(k)) * scale)
    return matmul(a, v)


def _full_forward(x, wq, wk, wv):
    q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
    scale = 1.0 / np.sqrt(q.shape[-1])
    a = softmax_rows(matmul(q, _swap(k)) * scale)
    out = matmul(a, v)
    return out, (x, q, k, v, a, scale)


def _full_backward(g, cache, wq, wk, wv):
    x, q, k, v, a, scale = cache
    dv = matmul(_swap(a), g)
    da = matmul(g, _swap(v))
    dz = _softmax_vjp(a, da)
    dq = matmul(dz, k) * scale
    dk = matmul(_swap(dz), q) * scale
    d = x.shape[-1]
    x2 = x.reshape(-1, d)
    dwq = matmul(x2.T, dq.reshape(-1, dq.shape[-1]))
    dwk = matmul(x2.T, dk.reshape(-1, dk.shape[-1]))
    dwv = matmul(x2.T, dv.reshape(-1, dv.shape[-1]))
    dx = matmul(dq, wq.T) + matmul(dk, wk.T) + matmul(dv, wv.T)
    return dx, dwq, dwk, dwv


def full_attention(x: Tensor, w_q: Parameter, w_k: Parameter, w_v: Parameter) -> Tensor:
    """Quadratic reference kernel: softmax(x W_q (x W_k)ᵀ / √d) x W_v."""
    xb, squeeze = _batched(x)
    out, _ = _full_forward(xb, w_q.value, w_k.value, w_v.value)
    return out[0] if squeeze else out


class FullAttention(Block):
    def __init__(self, name: str, d: int, rng: np.random.Generator):
        super().__init__()
        self.w_q = self._param(f"{name}.w_q", core.glorot(rng, d, d))
        self.w_k = self._param(f"{name}.w_k", core.glorot(rng, d, d))
        self.w_v = self._param(f"{name}.w_v", core.glorot(rng, d, d))
        self._cache = None

    def forward(self, x: Tensor) -> Tensor:
        xb, self._squeeze = _batched(x)
        out, self._cache = _full_forward(xb, self.w_q.value, self.w_k.value, self.w_v.value)
        return out[0] if self._squeeze else out

    def backward(self, g: Tensor) -> Tensor:
        gb = g[None] if self._squeeze else np.asarray(g)
        dx, dwq, dwk, dwv = _full_backward(
            gb, self._cache, self.w_q.value, self.w_k.value, self.w_v.value
        )
        self.w_q.grad += dwq
        self.w_k.grad += dwk
        self.w_v.grad += dwv
        return dx[0] if self._squeeze else dx


# ---------------------------------------------------------------------------
# differential attention

@dataclass
class DiffAttnParams:
    """Projection weights (d × 2d), per-head suppression coefficients."""

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    lam: Parameter
    heads: int


def _diff_split(x, p: DiffAttnParams):
    b, length, d = x.shape
    h = p.heads
    two_d = p.w_q.value.shape[1]
    if two_d % h != 0 or (two_d // h) % 2 != 0:
        raise ConfigError(f"projection width {two_d} not splittable over {h} heads")
    wh = two_d // h
    dq = wh // 2

    def heads_of(m):
        return m.reshape(b, length, h, wh).transpose(0, 2, 1, 3)

    q = heads_of(matmul(x, p.w_q.value))
    k = heads_of(matmul(x, p.w_k.value))
    v = heads_of(matmul(x, p.w_v.value))
    return q[..., :dq], q[..., dq:], k[..., :dq], k[..., dq:], v, dq


def _diff_forward(x, p: DiffAttnParams):
    q1, q2, k1, k2, v, dq = _diff_split(x, p)
    scale = 1.0 / np.sqrt(dq)
    a1 = softmax_rows(matmul(q1, _swap(k1)) * scale)
    a2 = softmax_rows(matmul(q2, _swap(k2)) * scale)
    lam = p.lam.value.reshape(1, p.heads, 1, 1)
    w = a1 - lam * a2
    out_h = matmul(w, v)
    b, h, length, wh = out_h.shape
    out = out_h.transpose(0, 2, 1, 3).reshape(b, length, h * wh)
    return out, (x, q1, q2, k1, k2, v, a1, a2, w, scale)


def _diff_backward(g, cache, p: DiffAttnParams):
    x, q1, q2, k1, k2, v, a1, a2, w, scale = cache
    b, h, length, wh = v.shape
    dq = q1.shape[-1]
    gh = g.reshape(b, length, h, wh).transpose(0, 2, 1, 3)
    dv = matmul(_swap(w), gh)
    m = matmul(gh, _swap(v))
    lam = p.lam.value.reshape(1, h, 1, 1)
    dlam = -(m * a2).sum(axis=(0, 2, 3))
    dz1 = _softmax_vjp(a1, m)
    dz2 = _softmax_vjp(a2, -lam * m)
    dq1 = matmul(dz1, k1) * scale
    dk1 = matmul(_swap(dz1), q1) * scale
    dq2 = matmul(dz2, k2) * scale
    dk2 = matmul(_swap(dz2), q2) * scale

    def merge(h1, h2):
        full = np.concatenate([h1, h2], axis=-1)
        return full.transpose(0, 2, 1, 3).reshape(b, length, h * wh)

    dqm = merge(dq1, dq2)
    dkm = merge(dk1, dk2)
    dvm = dv.transpose(0, 2, 1, 3).reshape(b, length, h * wh)
    x2 = x.reshape(-1, x.shape[-1])
    dwq = matmul(x2.T, dqm.reshape(-1, dqm.shape[-1]))
    dwk = matmul(x2.T, dkm.reshape(-1, dkm.shape[-1]))
    dwv = matmul(x2.T, dvm.reshape(-1, dvm.shape[-1]))
    dx = (matmul(dqm, p.w_q.value.T) + matmul(dkm, p.w_k.value.T)
          + matmul(dvm, p.w_v.value.T))
    return dx, dwq, dwk, dwv, dlam


def diff_attention(x: Tensor, p: DiffAttnParams) -> Tensor:
    """Difference of two softmax attention maps: (A1 - λ A2) V.

    The queries and keys come from splitting d→2d projections along the
    last dimension; V keeps the full 2d width, so the output is (L, 2d).
    """
    xb, squeeze = _batched(x)
    out, _ = _diff_forward(xb, p)
    return out[0] if squeeze else out


class DiffAttention(Block):
    def __init__(self, name: str, d: int, heads: int, rng: np.random.Generator,
                 lambda_init: float = 0.5):
        super().__init__()
        if d % heads != 0:
            raise ConfigError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.w_q = self._param(f"{name}.w_q", core.glorot(rng, d, 2 * d))
        self.w_k = self._param(f"{name}.w_k", core.glorot(rng, d, 2 * d))
        self.w_v = self._param(f"{name}.w_v", core.glorot(rng, d, 2 * d))
        self.lam = self._param(f"{name}.lambda", np.full(heads, lambda_init))
        self._cache = None

    @property
    def params(self) -> DiffAttnParams:
        return DiffAttnParams(self.w_q, self.w_k, self.w_v, self.lam, self.heads)

    def forward(self, x: Tensor) -> Tensor:
        xb, self._squeeze = _batched(x)
        out, self._cache = _diff_forward(xb, self.params)
        return out[0] if self._squeeze else out

    def backward(self, g: Tensor) -> Tensor:
        gb = g[None] if self._squeeze else np.asarray(g)
        dx, dwq, dwk, dwv, dlam = _diff_backward(gb, self._cache, self.params)
        self.w_q.grad += dwq
        self.w_k.grad += dwk
        self.w_v.grad += dwv
        self.lam.grad += dlam
        return dx[0] if self._squeeze else dx


# ---------------------------------------------------------------------------
# windowed ReLU linear attention

@dataclass
class LdtParams:
    """Square projections, window length, and the denominator guard."""

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    window: int
    guard: float = 1e-9


def _ldt_forward(x, p: LdtParams):
    if p.window < 1:
        raise ConfigError(f"window must be >= 1, got {p.window}")
    q, k, v = matmul(x, p.w_q.value), matmul(x, p.w_k.value), matmul(x, p.w_v.value)
    b, length, d = q.shape
    out = np.empty_like(v)
    caches = []
    for s in range(0, length, p.window):
        e = min(s + p.window, length)
        pw = relu(q[:, s:e])
        rw = relu(k[:, s:e])
        vw = v[:, s:e]
        sv = matmul(_swap(rw), vw)            # (B, d, d) key-value summary
        sk = rw.sum(axis=1)                   # (B, d)
        num = matmul(pw, sv)
        den = matmul(pw, sk[:, :, None]) + p.guard
        out[:, s:e] = num / den
        caches.append((s, e, pw, rw, vw, sv, sk, num, den))
    return out, (x, q, k, caches)


def _ldt_backward(g, cache, p: LdtParams):
    x, q, k, caches = cache
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(q)
    for s, e, pw, rw, vw, sv, sk, num, den in caches:
        gw = g[:, s:e]
        dnum = gw / den
        dden = -(gw * num).sum(axis=-1, keepdims=True) / (den * den)
        dp = matmul(dnum, _swap(sv)) + dden * sk[:, None, :]
        dsv = matmul(_swap(pw), dnum)
        dsk = (pw * dden).sum(axis=1)
        dv[:, s:e] = matmul(rw, dsv)
        dr = matmul(vw, _swap(dsv)) + dsk[:, None, :]
        dq[:, s:e] = np.where(q[:, s:e] > 0, dp, 0.0)
        dk[:, s:e] = np.where(k[:, s:e] > 0, dr, 0.0)
    x2 = x.reshape(-1, x.shape[-1])
    dwq = matmul(x2.T, dq.reshape(-1, dq.shape[-1]))
    dwk = matmul(x2.T, dk.reshape(-1, dk.shape[-1]))
    dwv = matmul(x2.T, dv.reshape(-1, dv.shape[-1]))
    dx = (matmul(dq, p.w_q.value.T) + matmul(dk, p.w_k.value.T)
          + matmul(dv, p.w_v.value.T))
    return dx, dwq, dwk, dwv


def ldt_attention(x: Tensor, p: LdtParams) -> Tensor:
    """ReLU-kernel attention evaluated through key/value aggregates.

    Within each non-overlapping window, out_i = ReLU(q_i)·Σ_j ReLU(k_j)ᵀv_j
    divided by ReLU(q_i)·Σ_j ReLU(k_j)ᵀ + guard, so cost is O(L d²). A row
    whose rectified query is all zero maps to zero output via the guard.
    """
    xb, squeeze = _batched(x)
    out, _ = _ldt_forward(xb, p)
    return out[0] if squeeze else out


class LdtAttention(Block):
    def __init__(self, name: str, d: int, window: int, rng: np.random.Generator,
                 guard: float = 1e-9):
        super().__init__()
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        self.window = window
        self.guard = guard
        self.w_q = self._param(f"{name}.w_q", core.glorot(rng, d, d))
        self.w_k = self._param(f"{name}.w_k", core.glorot(rng, d, d))
        self.w_v = self._param(f"{name}.w_v", core.glorot(rng, d, d))
        self._cache = None

    @property
    def params(self) -> LdtParams:
        return LdtParams(self.w_q, self.w_k, self.w_v, self.window, self.guard)

    def forward(self, x: Tensor) -> Tensor:
        xb, self._squeeze = _batched(x)
        out, self._cache = _ldt_forward(xb, self.params)
        return out[0] if self._squeeze else out

    def backward(self, g: Tensor) -> Tensor:
        gb = g[None] if self._squeeze else np.asarray(g)
        dx, dwq, dwk, dwv = _ldt_backward(gb, self._cache, self.params)
        self.w_q.grad += dwq
        self.w_k.grad += dwk
        self.w_v.grad += dwv
        return dx[0] if self._squeeze else dx


# ---------------------------------------------------------------------------
# FiLM conditioning

def _film_forward(x, cond, wg, wb):
    gamma = matmul(cond, wg) + 1.0
    beta = matmul(cond, wb)
    return gamma * x + beta, (x, cond, gamma)


def film(x: Tensor, cond: Tensor, w_gamma: Parameter, w_beta: Parameter) -> Tensor:
    """Frame-wise affine modulation: (cond w_γ + 1) ⊙ x + cond w_β.

    The +1 offset makes zero weights (or zero conditioning) the identity.
    """
    xb, squeeze = _batched(x)
    out, _ = _film_forward(xb, np.asarray(cond, dtype=np.float64),
                           w_gamma.value, w_beta.value)
    return out[0] if squeeze else out


class Film(Block):
    def __init__(self, name: str, cond_dim: int, d: int, rng: np.random.Generator,
                 zero_init: bool = False):
        super().__init__()
        # zero_init starts at the identity modulation; deep stacks diverge at
        # initialization otherwise because gamma multiplies the residual stream
        make = (lambda: np.zeros((cond_dim, d))) if zero_init \
            else (lambda: core.glorot(rng, cond_dim, d))
        self.w_gamma = self._param(f"{name}.w_gamma", make())
        self.w_beta = self._param(f"{name}.w_beta", make())
        self._cache = None

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        xb, self._squeeze = _batched(x)
        out, self._cache = _film_forward(
            xb, np.asarray(cond, dtype=np.float64),
            self.w_gamma.value, self.w_beta.value,
        )
        return out[0] if self._squeeze else out

    def backward(self, g: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (dx, dcond); cond is shared across the batch axis."""
        gb = g[None] if self._squeeze else np.asarray(g)
        x, cond, gamma = self._cache
        dx = gb * gamma
        gx = (gb * x).sum(axis=0)
        gs = gb.sum(axis=0)
        self.w_gamma.grad += matmul(cond.T, gx)
        self.w_beta.grad += matmul(cond.T, gs)
        dcond = matmul(gx, self.w_gamma.value.T) + matmul(gs, self.w_beta.value.T)
        return (dx[0] if self._squeeze else dx), dcond

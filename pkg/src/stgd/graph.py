"""Distance-aware dancer graph and graph-convolution propagation.

The adjacency weight between dancers i and j is 1 / (||p_i - p_j|| + eps),
including the diagonal (which the formula maps to 1/eps, so degrees are
always positive and no explicit self-loops are needed). Graphs are pruned
to each node's k strongest edges (an edge survives if either endpoint keeps
it, preserving symmetry), then symmetrically normalized with the degrees of
the pruned graph.

``normalized_graphs`` is the batched per-frame builder shared by the
denoiser and the benchmark harness; the single-frame functions are the
reference implementations the tests check it against.
"""

from __future__ import annotations

import numpy as np
import numba

from . import core
from .core import Block, Parameter, Tensor, matmul, relu
from .errors import ConfigError, NumericError, ShapeError


def build_adjacency(positions: Tensor, epsilon: float) -> Tensor:
    """Inverse-distance adjacency for one frame of (N, 2) root positions."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ShapeError(f"positions must be (N, 2), got {pos.shape}")
    core.require_finite(pos, "build_adjacency")
    dx = pos[:, None, 0] - pos[None, :, 0]
    dy = pos[:, None, 1] - pos[None, :, 1]
    dist = np.sqrt(dx * dx + dy * dy)
    return 1.0 / (dist + epsilon)


def prune_topk(adjacency: Tensor, k: int) -> Tensor:
    """Zero all off-diagonal entries not in either endpoint's top-k.

    Each node marks its k largest off-diagonal weights; an edge is kept if
    either endpoint marked it. The diagonal is always retained. Idempotent
    for a fixed k.
    """
    if k < 1:
        raise ConfigError(f"top-k budget must be >= 1, got {k}")
    adj = np.asarray(adjacency, dtype=np.float64)
    n = adj.shape[0]
    if k >= n - 1:
        return adj.copy()
    off = adj.copy()
    np.fill_diagonal(off, -np.inf)
    # stable selection: sort descending, mark first k columns per row
    order = np.argsort(-off, axis=1, kind="stable")
    keep = np.zeros_like(adj, dtype=bool)
    rows = np.arange(n)[:, None]
    keep[rows, order[:, :k]] = True
    keep |= keep.T
    np.fill_diagonal(keep, True)
    return np.where(keep, adj, 0.0)


def normalize_adjacency(pruned: Tensor) -> Tensor:
    """Symmetric normalization D^{-1/2} A D^{-1/2} with degrees of ``pruned``."""
    adj = np.asarray(pruned, dtype=np.float64)
    deg = adj.sum(axis=1)
    if np.any(deg <= 0):
        raise NumericError("zero or negative degree row", where="normalize_adjacency")
    dinv = 1.0 / np.sqrt(deg)
    # scale by the symmetric product d_i d_j in one step so the result is
    # bit-exactly symmetric (multiplication is commutative, not associative)
    return adj * np.outer(dinv, dinv)


def default_top_k(n_dancers: int) -> int:
    """Default edge budget: complete graphs for small groups, capped beyond.

    Groups of up to 8 dancers keep every edge (k = N-1); larger groups keep
    each node's 16 strongest edges, which bounds propagation cost while
    retaining local formation structure.
    """
    return min(16, max(1, n_dancers - 1))


@numba.njit(cache=True)
def _normalized_graphs_kernel(pos, eps, k):  # pragma: no cover - compiled
    L, N, _ = pos.shape
    out = np.empty((L, N, N))
    adj = np.empty((N, N))
    keep = np.empty((N, N), dtype=np.bool_)
    dinv = np.empty(N)
    for l in range(L):
        for i in range(N):
            adj[i, i] = 1.0 / eps
            for j in range(i + 1, N):
                dx = pos[l, i, 0] - pos[l, j, 0]
                dy = pos[l, i, 1] - pos[l, j, 1]
                a = 1.0 / (np.sqrt(dx * dx + dy * dy) + eps)
                adj[i, j] = a
                adj[j, i] = a
        # per-node selection of the k largest off-diagonal weights
        for i in range(N):
            for j in range(N):
                keep[i, j] = i == j
            for _ in range(min(k, N - 1)):
                best = -1.0
                bj = -1
                for j in range(N):
                    if j != i and not keep[i, j] and adj[i, j] > best:
                        best = adj[i, j]
                        bj = j
                if bj >= 0:
                    keep[i, bj] = True
        for i in range(N):
            for j in range(i + 1, N):
                if not (keep[i, j] or keep[j, i]):
                    adj[i, j] = 0.0
                    adj[j, i] = 0.0
        for i in range(N):
            s = 0.0
            for j in range(N):
                s += adj[i, j]
            dinv[i] = 1.0 / np.sqrt(s)
        for i in range(N):
            for j in range(N):
                out[l, i, j] = adj[i, j] * (dinv[i] * dinv[j])
    return out


def normalized_graphs(positions: Tensor, epsilon: float, k: int | None = None) -> Tensor:
    """Build, prune and normalize one graph per frame.

    ``positions`` is (L, N, 2); returns (L, N, N). This is the code path the
    denoiser runs at every diffusion step and the one the benchmark times.
    """
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    pos = core.as_tensor(positions)
    if pos.ndim != 3 or pos.shape[2] != 2:
        raise ShapeError(f"positions must be (L, N, 2), got {pos.shape}")
    n = pos.shape[1]
    if k is None:
        k = default_top_k(n)
    if k < 1:
        raise ConfigError(f"top-k budget must be >= 1, got {k}")
    out = _normalized_graphs_kernel(pos, float(epsilon), int(k))
    return out


def gcn_layer(h: Tensor, normalized: Tensor, w: Parameter) -> Tensor:
    """One propagation step ReLU(normalized @ h @ w) for a single frame."""
    h = np.asarray(h)
    a = np.asarray(normalized)
    if a.shape[0] != a.shape[1] or a.shape[1] != h.shape[0]:
        raise ShapeError(f"gcn_layer: adjacency {a.shape} vs features {h.shape}")
    return relu(matmul(a, matmul(h, w.value)))


class GcnLayer(Block):
    """Learnable graph convolution applied independently per frame.

    ``forward`` takes frame-major features (L, N, d_in) and the per-frame
    normalized adjacencies (L, N, N). The adjacency is a function of the
    (non-learnable) input positions, so no gradient flows into it.
    """

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.w = self._param(f"{name}.w", core.glorot(rng, d_in, d_out))
        self._h: Tensor | None = None
        self._norm: Tensor | None = None
        self._hw: Tensor | None = None
        self._pre: Tensor | None = None

    def forward(self, h: Tensor, norm: Tensor) -> Tensor:
        self._h, self._norm = h, norm
        self._hw = matmul(h, self.w.value)
        self._pre = matmul(norm, self._hw)
        return relu(self._pre)

    def backward(self, g: Tensor) -> Tensor:
        dpre = np.where(self._pre > 0, g, 0.0)
        # adjacency is symmetric: d(hw) = norm^T @ dpre = norm @ dpre
        dhw = matmul(self._norm, dpre)
        d_in = self._h.shape[-1]
        self.w.grad += matmul(
            self._h.reshape(-1, d_in).T, dhw.reshape(-1, dhw.shape[-1])
        )
        return matmul(dhw, self.w.value.T)

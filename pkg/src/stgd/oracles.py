"""Independent direct evaluations used to cross-check the fast kernels.

Everything here is written as plain loops over the defining formulas and
deliberately shares no code with the production kernels. Agreement is
asserted by the validation suite and the tests; these implementations are
the reference side of every dual-route check.
"""

from __future__ import annotations

import math

import numpy as np


def _softmax_row(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    e = np.exp(shifted)
    return e / e.sum()


def direct_full_attention(x, w_q, w_k, w_v) -> np.ndarray:
    """Double-loop softmax attention on a single (L, d) sequence."""
    x = np.asarray(x, dtype=np.float64)
    q = x @ w_q
    k = x @ w_k
    v = x @ w_v
    length, d = q.shape
    out = np.zeros((length, v.shape[1]))
    for i in range(length):
        logits = np.array([q[i] @ k[j] / math.sqrt(d) for j in range(length)])
        a = _softmax_row(logits)
        for j in range(length):
            out[i] += a[j] * v[j]
    return out


def direct_diff_attention(x, w_q, w_k, w_v, lam, heads: int) -> np.ndarray:
    """Differential attention evaluated head by head, row by row."""
    x = np.asarray(x, dtype=np.float64)
    length, d = x.shape
    q_full = x @ w_q
    k_full = x @ w_k
    v_full = x @ w_v
    two_d = q_full.shape[1]
    wh = two_d // heads
    dq = wh // 2
    lam = np.asarray(lam, dtype=np.float64).reshape(heads)
    out = np.zeros((length, two_d))
    for h in range(heads):
        cols = slice(h * wh, (h + 1) * wh)
        qh = q_full[:, cols]
        kh = k_full[:, cols]
        vh = v_full[:, cols]
        q1, q2 = qh[:, :dq], qh[:, dq:]
        k1, k2 = kh[:, :dq], kh[:, dq:]
        for i in range(length):
            l1 = np.array([q1[i] @ k1[j] / math.sqrt(dq) for j in range(length)])
            l2 = np.array([q2[i] @ k2[j] / math.sqrt(dq) for j in range(length)])
            a1 = _softmax_row(l1)
            a2 = _softmax_row(l2)
            w = a1 - lam[h] * a2
            acc = np.zeros(wh)
            for j in range(length):
                acc += w[j] * vh[j]
            out[i, cols] = acc
    return out


def direct_relu_kernel_attention(x, w_q, w_k, w_v, window: int,
                                 guard: float = 1e-9) -> np.ndarray:
    """O(L²) weighted average with w_ij = ReLU(q_i)·ReLU(k_j), per window."""
    x = np.asarray(x, dtype=np.float64)
    q = np.maximum(x @ w_q, 0.0)
    k = np.maximum(x @ w_k, 0.0)
    v = x @ w_v
    length, d = q.shape
    out = np.zeros((length, d))
    for start in range(0, length, window):
        end = min(start + window, length)
        for i in range(start, end):
            num = np.zeros(d)
            den = guard
            for j in range(start, end):
                w_ij = float(q[i] @ k[j])
                num += w_ij * v[j]
                den += w_ij
            out[i] = num / den
    return out


def direct_gcn_layer(h, normalized, w) -> np.ndarray:
    """Three-nested-loop ReLU(A h w) for a single frame."""
    h = np.asarray(h, dtype=np.float64)
    a = np.asarray(normalized, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, d_in = h.shape
    d_out = w.shape[1]
    hw = np.zeros((n, d_out))
    for i in range(n):
        for o in range(d_out):
            acc = 0.0
            for c in range(d_in):
                acc += h[i, c] * w[c, o]
            hw[i, o] = acc
    out = np.zeros((n, d_out))
    for i in range(n):
        for o in range(d_out):
            acc = 0.0
            for j in range(n):
                acc += a[i, j] * hw[j, o]
            out[i, o] = max(acc, 0.0)
    return out


def brute_tif(motion, delta: float, position_channels=(0, 1)) -> float:
    """Frame/pair double loop definition of the intersection frequency."""
    motion = np.asarray(motion, dtype=np.float64)
    n, length, _ = motion.shape
    cx, cy = position_channels
    hits = 0
    for l in range(length):
        found = False
        for i in range(n):
            for j in range(i + 1, n):
                dx = motion[i, l, cx] - motion[j, l, cx]
                dy = motion[i, l, cy] - motion[j, l, cy]
                if math.sqrt(dx * dx + dy * dy) < delta:
                    found = True
                    break
            if found:
                break
        if found:
            hits += 1
    return hits / length


def pearson(a, b) -> float:
    """Textbook correlation coefficient."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    am = a - a.mean()
    bm = b - b.mean()
    return float((am * bm).sum() / math.sqrt((am ** 2).sum() * (bm ** 2).sum()))

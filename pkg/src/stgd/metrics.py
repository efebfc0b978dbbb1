"""Desk-scale group-coordination metrics.

These are documented proxies computed from root trajectories: a clearance
violation rate (``tif``), a velocity-correlation coherence score
(``gmc_proxy``), and mean pairwise distance between normalized samples
(``diversity``). They are labelled "proxy" in reports because published
group-dance numbers come from external feature extractors and are not
comparable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .core import Tensor
from .errors import MetricError


def _positions(motion: Tensor, position_channels) -> Tensor:
    motion = np.asarray(motion, dtype=np.float64)
    return motion[:, :, list(position_channels)]


def pair_distances(motion: Tensor, position_channels=(0, 1)) -> Tensor:
    """Per-frame distance for every dancer pair; shape (n_pairs, L)."""
    pos = _positions(motion, position_channels)
    n = pos.shape[0]
    rows = []
    for i in range(n):
        for j in range(i + 1, n):
            diff = pos[i] - pos[j]
            rows.append(np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2))
    return np.stack(rows, axis=0)


def tif(motion: Tensor, delta: float, position_channels=(0, 1)) -> float:
    """Fraction of frames where any dancer pair is strictly closer than delta."""
    motion = np.asarray(motion, dtype=np.float64)
    if motion.shape[0] < 2:
        raise MetricError("trajectory intersection needs at least two dancers")
    dists = pair_distances(motion, position_channels)
    hit = (dists < delta).any(axis=0)
    return float(hit.sum()) / motion.shape[1]


def _speeds(pos: Tensor) -> Tensor:
    diff = pos[:, 1:, :] - pos[:, :-1, :]
    return np.sqrt(diff[:, :, 0] ** 2 + diff[:, :, 1] ** 2)


def gmc_proxy(motion: Tensor, position_channels=(0, 1)) -> float:
    """Mean Pearson correlation of per-frame speed profiles over dancer pairs.

    Pairs with a zero-variance speed stream are skipped; if every pair is
    skipped the metric is undefined.
    """
    motion = np.asarray(motion, dtype=np.float64)
    n, length = motion.shape[0], motion.shape[1]
    if n < 2:
        raise MetricError("group motion correlation needs at least two dancers")
    if length < 3:
        raise MetricError("group motion correlation needs at least three frames")
    sp = _speeds(_positions(motion, position_channels))
    centered = sp - sp.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    vals = []
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0.0 or norms[j] == 0.0:
                continue
            vals.append(float((centered[i] * centered[j]).sum() / (norms[i] * norms[j])))
    if not vals:
        raise MetricError("all dancer pairs have constant speed; correlation undefined")
    return float(np.mean(vals))


def diversity(samples: list[Tensor]) -> float:
    """Mean pairwise Euclidean distance between per-channel-normalized samples.

    Channels are z-scored with statistics pooled over the whole sample list
    (constant channels contribute zero). Order-invariant by construction.
    """
    if len(samples) < 2:
        raise MetricError("diversity needs at least two samples")
    arrs = [np.asarray(s, dtype=np.float64) for s in samples]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise MetricError("diversity needs samples of equal shape")
    pooled = np.concatenate([a.reshape(-1, shape[-1]) for a in arrs], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    flats = [((a - mean) / std).ravel() for a in arrs]
    total = 0.0
    count = 0
    for i in range(len(flats)):
        for j in range(i + 1, len(flats)):
            total += float(np.sqrt(((flats[i] - flats[j]) ** 2).sum()))
            count += 1
    return total / count


@dataclass
class MetricReport:
    """One evaluation of the proxy metrics; round-trips through JSON."""

    tif: float
    gmc_proxy: float
    diversity: float | None
    delta: float
    kind: str = "proxy"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        return MetricReport(**json.loads(text))


def evaluate(motion: Tensor, delta: float = 0.1, position_channels=(0, 1),
             samples: list[Tensor] | None = None) -> MetricReport:
    div = diversity(samples) if samples is not None and len(samples) >= 2 else None
    return MetricReport(
        tif=tif(motion, delta, position_channels),
        gmc_proxy=gmc_proxy(motion, position_channels),
        diversity=div, delta=delta)

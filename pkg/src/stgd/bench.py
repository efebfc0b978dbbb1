"""Wall-time scaling benchmarks and analytic multiply-accumulate counts.

Kernels are timed exactly as the denoiser runs them (same classes, same
functions). Each grid point reports the median of R repetitions, where a
repetition averages over enough back-to-back calls to dominate timer
resolution; warmup calls are excluded. A least-squares fit of log(time)
against log(size) yields the scaling slope; R² below 0.98 marks the run
unstable rather than passing.

Flop estimates count matmul multiply-accumulates only (the graph-building
arithmetic is elementwise and excluded); the instrumentation hook in
``stgd.core`` counts the same quantity at runtime, so the closed forms are
testable against real executions.

Measurement is strictly single-threaded: the harness pins the BLAS pools
to one thread and refuses to run if that fails.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import hashlib
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .attention import DiffAttention, FullAttention, LdtAttention
from .errors import BenchError
from .graph import GcnLayer, default_top_k, normalized_graphs
from .model import DenoiserConfig

MIN_SAMPLE_SECONDS = 1e-1


@dataclass
class GridPoint:
    size: int
    median_seconds: float
    flops_estimate: int
    checksum: str
    raw_seconds: list[float] = field(default_factory=list)


@dataclass
class BenchResult:
    kernel: str
    points: list[GridPoint]
    slope: float
    r2: float
    repetitions: int

    @property
    def stable(self) -> bool:
        return self.r2 >= 0.98


def fit_loglog(sizes, times) -> tuple[float, float]:
    """Least-squares slope and R² of log(time) vs log(size)."""
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    a = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(a, y, rcond=None)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - (float(res[0]) / ss_tot if len(res) and ss_tot > 0 else 0.0)
    return float(coef[0]), r2


_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_allocator_pinned = False


def _stabilize_allocator():
    """Pin glibc's malloc thresholds so large temporaries reuse the arena.

    The default dynamic mmap threshold makes wall time history-dependent
    (freshly mapped pages fault on every kernel call at some sizes and not
    others), which corrupts scaling fits. No-op off glibc.
    """
    global _allocator_pinned
    if _allocator_pinned:
        return
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6",
                           use_errno=True)
        one_gib = 1 << 30
        libc.mallopt(_M_MMAP_THRESHOLD, one_gib)
        libc.mallopt(_M_TRIM_THRESHOLD, one_gib)
        _allocator_pinned = True
    except (OSError, AttributeError):
        warnings.warn("could not pin malloc thresholds; timings may be noisier")


def _malloc_trim():
    """Release the arena between kernel grids so one kernel's peak memory
    cannot distort the next kernel's allocation behavior."""
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        libc.malloc_trim(0)
    except (OSError, AttributeError):
        pass


def _assert_single_threaded():
    pools = [p for p in threadpool_info()
             if p.get("user_api") in ("blas", "openmp")]
    bad = [p for p in pools if p.get("num_threads", 1) > 1]
    if bad:
        raise BenchError(
            "benchmark requires single-threaded kernels, found "
            + ", ".join(f"{p.get('internal_api')}={p.get('num_threads')}" for p in bad))


def _measure(fn, repetitions: int) -> list[float] | None:
    """R wall-time samples; each averages enough calls to swamp the timer."""
    fn()
    fn()  # warmup, excluded
    t0 = time.perf_counter()
    fn()
    est = time.perf_counter() - t0
    resolution = time.get_clock_info("perf_counter").resolution
    if est < 50.0 * resolution and est < 1e-7:
        return None
    inner = max(1, int(np.ceil(MIN_SAMPLE_SECONDS / max(est, 1e-9))))
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    return samples


def _checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()[:16]


def _run_grid(kernel: str, sizes, make_fn, flops_fn, repetitions: int) -> BenchResult:
    if repetitions < 5:
        raise BenchError("need at least 5 repetitions")
    if len(sizes) < 4 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise BenchError("need at least 4 strictly increasing grid sizes")
    _malloc_trim()
    points = []
    for size in sizes:
        fn, out_fn = make_fn(size)
        samples = _measure(fn, repetitions)
        if samples is None:
            warnings.warn(f"{kernel}: size {size} below timer resolution, dropped")
            continue
        points.append(GridPoint(
            size=size, median_seconds=float(np.median(samples)),
            flops_estimate=flops_fn(size), checksum=_checksum(out_fn()),
            raw_seconds=samples))
    if len(points) < 3:
        raise BenchError(f"{kernel}: fewer than 3 usable grid points")
    slope, r2 = fit_loglog([p.size for p in points],
                           [p.median_seconds for p in points])
    return BenchResult(kernel=kernel, points=points, slope=slope, r2=r2,
                       repetitions=repetitions)


# ---------------------------------------------------------------------------
# analytic multiply-accumulate counts (matmul MACs only)

def flops_full_attention(length: int, d: int) -> int:
    return 3 * length * d * d + 2 * length * length * d


def flops_diff_attention(length: int, d: int) -> int:
    return 6 * length * d * d + 4 * length * length * d


def flops_ldt_attention(length: int, d: int, window: int) -> int:
    del window  # aggregates are linear in L regardless of the window split
    return 3 * length * d * d + 2 * length * d * d + length * d


def flops_gcn_pipeline(n: int, length: int, d: int, layers: int = 2) -> int:
    return layers * length * (n * n * d + n * d * d)


@dataclass
class FlopEstimate:
    spatial: int
    temporal: int
    other: int

    @property
    def total(self) -> int:
        return self.spatial + self.temporal + self.other


def flop_estimate(cfg: DenoiserConfig, n_dancers: int, length: int) -> FlopEstimate:
    """Closed-form MAC count of one denoiser forward pass."""
    n, L, d, c = n_dancers, length, cfg.d_model, cfg.cond_dim
    spatial = cfg.gcn_layers * L * (n * n * d + n * d * d)
    temporal = 0
    ffm = cfg.ff_mult
    for i in range(cfg.decoder_layers):
        if i % 2 == 0:  # differential attention layer (+ output projection)
            attn = 6 * L * d * d + 4 * L * L * d + 2 * L * d * d
        else:           # windowed linear attention layer
            attn = 3 * L * d * d + 2 * L * d * d + L * d
        ff = 2 * ffm * L * d * d
        temporal += n * (attn + ff) + 2 * L * d * d  # FiLM maps shared over dancers
    other = (n * L * cfg.d_in * d          # input projection
             + n * L * d * d               # group-fusion mix
             + d * d                       # timestep projection
             + L * (c + d) * d             # conditioning projection
             + n * L * d * cfg.d_in)       # output head
    return FlopEstimate(spatial=spatial, temporal=temporal, other=other)


# ---------------------------------------------------------------------------
# benchmark entry points

def bench_attention(lengths, d: int = 64, window: int = 64, repetitions: int = 9,
                    heads: int = 4, seed: int = 0,
                    kernels=("full", "ldt", "diff")) -> dict[str, BenchResult]:
    """Time the temporal kernels across sequence lengths."""
    results = {}
    _stabilize_allocator()
    with threadpool_limits(limits=1):
        _assert_single_threaded()
        for kernel in kernels:
            def make_fn(length, kernel=kernel):
                rng = np.random.default_rng(seed + length)
                x = rng.standard_normal((length, d))
                if kernel == "full":
                    blk = FullAttention("bench", d, rng)
                elif kernel == "ldt":
                    blk = LdtAttention("bench", d, window, rng)
                elif kernel == "diff":
                    blk = DiffAttention("bench", d, heads, rng)
                else:
                    raise BenchError(f"unknown kernel {kernel!r}")
                return (lambda: blk.forward(x)), (lambda: blk.forward(x))

            flops = {
                "full": lambda L: flops_full_attention(L, d),
                "ldt": lambda L: flops_ldt_attention(L, d, window),
                "diff": lambda L: flops_diff_attention(L, d),
            }[kernel]
            results[kernel] = _run_grid(kernel, list(lengths), make_fn, flops,
                                        repetitions)
    return results


def bench_gcn(dancer_counts, length: int = 64, d: int = 32, repetitions: int = 9,
              gcn_layers: int = 2, epsilon: float = 0.1,
              seed: int = 0) -> BenchResult:
    """Time graph construction plus GCN propagation over all frames."""
    _stabilize_allocator()
    with threadpool_limits(limits=1):
        _assert_single_threaded()

        def make_fn(n):
            rng = np.random.default_rng(seed + n)
            pos = rng.standard_normal((length, n, 2))
            h = rng.standard_normal((length, n, d))
            layers = [GcnLayer(f"bench.{i}", d, d, rng) for i in range(gcn_layers)]
            k = default_top_k(n)

            def run():
                norm = normalized_graphs(pos, epsilon, k)
                x = h
                for layer in layers:
                    x = layer.forward(x, norm)
                return x

            return (lambda: run()), (lambda: run())

        return _run_grid("gcn", list(dancer_counts), make_fn,
                         lambda n: flops_gcn_pipeline(n, length, d, gcn_layers),
                         repetitions)


def write_bench_csv(results: dict[str, BenchResult], path) -> None:
    """Rows per grid point, then a '#'-prefixed summary block per kernel."""
    with open(path, "w") as fh:
        fh.write("kernel,size,median_seconds,flops_estimate,output_checksum\n")
        for res in results.values():
            for p in res.points:
                fh.write(f"{res.kernel},{p.size},{p.median_seconds!r},"
                         f"{p.flops_estimate},{p.checksum}\n")
        for res in results.values():
            fh.write(f"# {res.kernel}: slope={res.slope:.4f} r2={res.r2:.4f} "
                     f"reps={res.repetitions} stable={res.stable}\n")

"""Runtime invariant suite behind the ``validate`` CLI subcommand.

Each check is a named callable that raises AssertionError (or returns a
detail string) — oracle equivalences, gradient checks, schedule and graph
invariants, metric definitions. The CLI turns the results into a
machine-readable report and a nonzero exit code on any failure.

``fault`` injects a deliberate gradient perturbation into one named check
so the harness itself can be shown to catch bad gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention, core, data, diffusion, graph, metrics, model, oracles, train


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _check_core_ops() -> str:
    eye = np.eye(3)
    b = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(core.matmul(eye, b), b)
    assert np.array_equal(core.matmul(np.array([[1.0, 2], [3, 4]]),
                                      np.array([[0.0], [1.0]])),
                          np.array([[2.0], [4.0]]))
    assert np.array_equal(core.relu(np.array([-1.0, 0.0, 2.0])),
                          np.array([0.0, 0.0, 2.0]))
    rng = np.random.default_rng(0)
    x = rng.uniform(-1e3, 1e3, size=(40, 7))
    s = core.softmax_rows(x)
    worst = float(np.abs(s.sum(axis=1) - 1.0).max())
    assert worst <= 1e-12, f"row sums off by {worst}"
    assert np.allclose(core.softmax_rows(np.array([[0.0, np.log(3.0)]])),
                       [[0.25, 0.75]], atol=1e-15)
    return f"softmax row-sum error {worst:.2e}"


def _check_graph_examples() -> str:
    adj = graph.build_adjacency(np.array([[0.0, 0.0], [3.0, 4.0]]), 0.1)
    assert abs(adj[0, 1] - 1.0 / 5.1) < 1e-15
    assert abs(adj[0, 0] - 10.0) < 1e-12
    a = np.array([[10.0, 0.2], [0.2, 10.0]])
    norm = graph.normalize_adjacency(a)
    assert abs(norm[0, 1] - 0.2 / 10.2) < 1e-15
    w = np.array([[0.0, 5.0, 1.0], [5.0, 0.0, 3.0], [1.0, 3.0, 0.0]])
    np.fill_diagonal(w, 9.0)
    pruned = graph.prune_topk(w, 1)
    assert pruned[0, 2] == 0.0 and pruned[2, 0] == 0.0
    assert pruned[0, 1] == 5.0 and pruned[1, 2] == 3.0
    assert np.array_equal(graph.prune_topk(pruned, 1), pruned), "prune not idempotent"
    return "hand examples and idempotence hold"


def _check_graph_spectra() -> str:
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(2, 17))
        pos = rng.uniform(-5, 5, size=(n, 2))
        adj = graph.build_adjacency(pos, 0.1)
        if trial % 2 == 0:
            adj = graph.prune_topk(adj, int(rng.integers(1, n)))
        norm = graph.normalize_adjacency(adj)
        assert np.array_equal(norm, norm.T), "normalized adjacency not symmetric"
        radius = float(np.abs(np.linalg.eigvalsh(norm)).max())
        worst = max(worst, radius)
        assert radius <= 1.0 + 1e-9, f"spectral radius {radius}"
    return f"max spectral radius {worst:.12f} over 100 graphs"


def _check_graph_fast_path() -> str:
    rng = np.random.default_rng(3)
    for n in (1, 2, 5, 11):
        pos = rng.uniform(-4, 4, size=(6, n, 2))
        k = graph.default_top_k(n)
        fast = graph.normalized_graphs(pos, 0.1, k)
        for l in range(6):
            ref = graph.normalize_adjacency(
                graph.prune_topk(graph.build_adjacency(pos[l], 0.1), k))
            err = float(np.abs(fast[l] - ref).max())
            assert err <= 1e-12, f"fast graph path deviates by {err}"
    return "batched builder matches reference build/prune/normalize"


def _check_gcn_equivariance() -> str:
    rng = np.random.default_rng(11)
    n, d_in, d_out = 5, 3, 4
    h = rng.standard_normal((n, d_in))
    pos = rng.uniform(-2, 2, size=(n, 2))
    norm = graph.normalize_adjacency(graph.build_adjacency(pos, 0.1))
    w = core.Parameter("w", rng.standard_normal((d_in, d_out)))
    base = graph.gcn_layer(h, norm, w)
    perm = rng.permutation(n)
    permuted = graph.gcn_layer(h[perm], norm[np.ix_(perm, perm)], w)
    err = float(np.abs(permuted - base[perm]).max())
    assert err <= 1e-12, f"equivariance error {err}"
    ref = oracles.direct_gcn_layer(h, norm, w.value)
    err2 = float(np.abs(base - ref).max())
    assert err2 <= 1e-12, f"loop-oracle mismatch {err2}"
    return f"equivariance {err:.2e}, loop oracle {err2:.2e}"


def _check_attention_oracles() -> str:
    rng = np.random.default_rng(21)
    worst = 0.0
    for trial in range(10):
        length = int(rng.integers(2, 40))
        d = int(rng.choice([2, 4, 6]))
        x = rng.standard_normal((length, d))
        blk = attention.DiffAttention("v", d, int(rng.choice([1, 2])), rng,
                                      lambda_init=float(rng.uniform(0, 1)))
        got = blk.forward(x)
        ref = oracles.direct_diff_attention(
            x, blk.w_q.value, blk.w_k.value, blk.w_v.value, blk.lam.value,
            blk.heads)
        worst = max(worst, float(np.abs(got - ref).max()))
        lblk = attention.LdtAttention("v", d, int(rng.integers(1, length + 2)), rng)
        got = lblk.forward(x)
        ref = oracles.direct_relu_kernel_attention(
            x, lblk.w_q.value, lblk.w_k.value, lblk.w_v.value, lblk.window)
        worst = max(worst, float(np.abs(got - ref).max()))
    assert worst <= 1e-10, f"oracle deviation {worst}"
    return f"max kernel-vs-oracle deviation {worst:.2e}"


def _check_lambda_zero_reduction() -> str:
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(5):
        d, heads, length = 6, 1, 9
        blk = attention.DiffAttention("v", d, heads, rng, lambda_init=0.0)
        x = rng.standard_normal((length, d))
        got = blk.forward(x)
        q = x @ blk.w_q.value
        k = x @ blk.w_k.value
        v = x @ blk.w_v.value
        ref = attention.softmax_attention(q[:, :d], k[:, :d], v)
        worst = max(worst, float(np.abs(got - ref).max()))
    assert worst <= 1e-12, f"λ=0 deviation {worst}"
    return f"max deviation {worst:.2e}"


def _check_denoiser_contracts() -> str:
    cfg = model.DenoiserConfig(d_in=4, d_model=8, gcn_layers=1, decoder_layers=2,
                               heads=2, window=4, cond_dim=3, max_dancers=4)
    net = model.Denoiser(cfg, seed=5)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 10, 4))
    music = rng.standard_normal((10, 3))
    out1 = net.forward(x, music, 2)
    out2 = net.forward(x, music, 2)
    assert out1.shape == x.shape
    assert np.array_equal(out1, out2), "forward not deterministic"
    music2 = music + rng.standard_normal(music.shape)
    assert np.abs(net.forward(x, music2, 2) - out1).max() > 0, \
        "output ignores conditioning"
    net.fusion.emb.value[...] = net.fusion.emb.value[0]
    base = net.forward(x, music, 2)
    perm = np.array([2, 0, 1])
    permuted = net.forward(x[perm], music, 2)
    err = float(np.abs(permuted - base[perm]).max())
    assert err <= 1e-9, f"permutation equivariance error {err}"
    return f"shape/determinism ok; equivariance {err:.2e}"


def _check_schedule_invariants() -> str:
    for T in (10, 50, 1000):
        s = diffusion.make_schedule(T, 1e-4, 0.02)
        assert np.all((s.beta > 0) & (s.beta < 1))
        assert np.all(np.diff(s.alpha_bar) < 0) if T > 1 else True
        assert 0.0 < s.alpha_bar[-1] < 1.0
    s = diffusion.make_schedule(1000, 1e-4, 0.02)
    assert abs(s.alpha_bar[-1] - 4.0e-5) < 1e-5
    return f"alpha_bar(T=1000) = {s.alpha_bar[-1]:.3e}"


def _check_diffusion_sampling() -> str:
    s = diffusion.make_schedule(1000, 1e-4, 0.02)
    rng = np.random.default_rng(40)
    noise = rng.standard_normal((100000,))
    x_t = diffusion.q_sample(np.zeros(100000), 1000, noise, s)
    mean = float(x_t.mean())
    var = float(x_t.var())
    assert abs(mean) <= 0.02, f"q_sample mean {mean}"
    assert 0.95 <= var <= 1.05, f"q_sample variance {var}"

    s2 = diffusion.make_schedule(50, 1e-4, 0.2)
    x0 = rng.standard_normal((2, 6, 3))
    x1 = rng.standard_normal((2, 6, 3))
    back = diffusion.p_sample_step(x1, 1, x0, s2, rng_seed=1)
    err = float(np.abs(back - x0).max())
    assert err <= 1e-12, f"t=1 recovery error {err}"

    class Oracle:
        def __init__(self, target, cfg):
            self.target = target
            self.cfg = cfg

        def forward(self, x_t, music, t):
            return self.target

    cfg = model.DenoiserConfig(d_in=3, cond_dim=2)
    target = rng.standard_normal((2, 6, 3))
    music = np.zeros((6, 2))
    out = diffusion.generate(music, 2, 6, Oracle(target, cfg), s2, seed=9)
    err2 = float(np.abs(out - target).max())
    assert err2 <= 1e-8, f"oracle generate error {err2}"
    return f"t=1 exact ({err:.1e}); oracle recovery {err2:.1e}"


def _check_loss_examples() -> str:
    w = diffusion.LossWeights(position_channels=(0, 1))
    x0 = np.zeros((1, 2, 3))
    x0[0, 1, 0] = 1.0
    total, parts = diffusion.loss(x0, x0, w)
    assert total == 0.0 and all(p == 0.0 for p in parts)
    x0 = np.array([0.0, 1.0]).reshape(1, 2, 1)
    xh = np.zeros((1, 2, 1))
    w1 = diffusion.LossWeights(position_channels=(0, 0))
    try:
        diffusion.LossWeights(lambda_pos=-1.0)
        raise AssertionError("negative weight accepted")
    except Exception:
        pass
    w1 = diffusion.LossWeights(position_channels=(0, 1))
    # single channel variant: reuse formula on d=1 via explicit channels
    total, (simple, pos, vel, contact) = diffusion.loss(
        x0, xh, diffusion.LossWeights(lambda_pos=0.0, position_channels=(0, 0)))
    assert abs(simple - 0.5) < 1e-15 and abs(vel - 1.0) < 1e-15
    return "hand-worked loss parts match"


def _check_adam() -> str:
    store = core.ParameterStore()
    p = store.register(core.Parameter("w", np.array([1.0])))
    opt = train.make_adam(store, lr=0.1)
    p.grad[...] = 1.0
    train.adam_step(store, opt)
    expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
    assert abs(p.value[0] - expect) < 1e-12, f"got {p.value[0]}, want {expect}"
    store2 = core.ParameterStore()
    q = store2.register(core.Parameter("w", np.array([2.0, -1.0])))
    opt2 = train.make_adam(store2, lr=0.1)
    train.adam_step(store2, opt2)  # all-zero gradients on a fresh state
    assert np.array_equal(q.value, np.array([2.0, -1.0]))
    return "first-step update and zero-grad no-op hold"


def _check_grad_coverage() -> str:
    missing = train.uncovered_blocks()
    assert not missing, f"blocks without gradient checks: {missing}"
    return f"{len(train.CHECKS)} checks cover {len(core.BLOCK_TYPES)} block types"


def _check_metrics() -> str:
    rng = np.random.default_rng(50)
    for _ in range(10):
        n = int(rng.integers(2, 5))
        length = int(rng.integers(3, 30))
        motion = rng.uniform(-2, 2, size=(n, length, 4))
        delta = float(rng.uniform(0.1, 2.0))
        fast = metrics.tif(motion, delta)
        ref = oracles.brute_tif(motion, delta)
        assert fast == ref, f"tif {fast} != brute force {ref}"
        shifted = motion.copy()
        shifted[:, :, 0] += 3.7
        shifted[:, :, 1] -= 1.2
        assert metrics.tif(shifted, delta) == fast
    base = rng.standard_normal((1, 40, 4)).repeat(3, axis=0)
    base += np.arange(3).reshape(3, 1, 1) * np.array([5.0, 5.0, 0, 0])
    g = metrics.gmc_proxy(base)
    assert abs(g - 1.0) <= 1e-12, f"translated copies give {g}"
    sams = [rng.standard_normal((2, 5, 3)) for _ in range(3)]
    d1 = metrics.diversity(sams)
    d2 = metrics.diversity(sams[::-1])
    assert abs(d1 - d2) <= 1e-12
    return "tif brute-force identity, translation invariance, gmc=1 on copies"


def _check_dataset() -> str:
    rng = np.random.default_rng(60)
    worst = np.inf
    for trial in range(12):
        style = data.STYLES[trial % len(data.STYLES)]
        n = int(rng.integers(2, 7))
        s = data.gen_synthetic(n, 50, style, 0.05, int(rng.integers(1 << 30)))
        pos = s.motion[:, :, :2]
        worst = min(worst, data.min_pairwise_distance(pos))
        assert np.abs(s.motion).max() <= 10.0
        assert np.abs(np.diff(s.motion, axis=1)).max() <= 1.0
        phase_sq = s.cond[:, 0] ** 2 + s.cond[:, 1] ** 2
        assert np.abs(phase_sq - 1.0).max() <= 1e-12
    assert worst >= 0.1, f"clearance violated: {worst}"
    return f"12 clips collision-free (min distance {worst:.3f})"


def _check_timestep_embedding() -> str:
    emb0 = model.sinusoid(0.0, 8)
    assert np.array_equal(emb0[0::2], np.zeros(4))
    assert np.array_equal(emb0[1::2], np.ones(4))
    grid = np.stack([model.sinusoid(float(t), 16) for t in range(51)])
    dists = np.linalg.norm(grid[:, None] - grid[None, :], axis=-1)
    np.fill_diagonal(dists, np.inf)
    assert dists.min() > 1e-6, "timestep embeddings collide"
    return f"embeddings distinct over t=0..50 (min gap {dists.min():.3f})"


VALIDATORS = [
    ("core_ops", _check_core_ops),
    ("graph_examples", _check_graph_examples),
    ("graph_spectra", _check_graph_spectra),
    ("graph_fast_path", _check_graph_fast_path),
    ("gcn_equivariance", _check_gcn_equivariance),
    ("attention_oracles", _check_attention_oracles),
    ("lambda_zero_reduction", _check_lambda_zero_reduction),
    ("denoiser_contracts", _check_denoiser_contracts),
    ("schedule_invariants", _check_schedule_invariants),
    ("diffusion_sampling", _check_diffusion_sampling),
    ("loss_examples", _check_loss_examples),
    ("adam", _check_adam),
    ("grad_coverage", _check_grad_coverage),
    ("metrics", _check_metrics),
    ("dataset_clearance", _check_dataset),
    ("timestep_embedding", _check_timestep_embedding),
]


def run_validation(fault: str | None = None) -> list[CheckResult]:
    """Run every named invariant; optionally inject a gradient fault."""
    results: list[CheckResult] = []
    for name, fn in VALIDATORS:
        try:
            detail = fn() or "ok"
            results.append(CheckResult(name, True, detail))
        except Exception as err:  # noqa: BLE001 - report, do not crash the suite
            results.append(CheckResult(name, False, f"{type(err).__name__}: {err}"))
    for check_name in train.CHECKS:
        perturb = fault == check_name
        rep = train.grad_check(check_name, perturb=perturb)
        detail = (f"max rel err {rep.max_rel_err:.2e} over {rep.n_checked} entries"
                  + (" [fault injected]" if perturb else ""))
        results.append(CheckResult(f"grad.{check_name}", rep.passed, detail))
    return results

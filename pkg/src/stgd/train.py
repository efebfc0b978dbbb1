"""Adam optimization, the toy training loop, and the finite-difference
gradient verification harness.

Every learnable block class must have an entry in ``CHECKS``; the test
suite fails if a block exists without one (coverage gate). Checks compare
the hand-written backward pass against central differences of a randomly
weighted scalarization of the block output — random weights, because a
plain sum has zero gradient through softmax rows and would check nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import attention, core, diffusion, graph, model
from .core import Parameter, ParameterStore, Tensor
from .errors import ConfigError, DivergenceError, NumericError
from .data import SyntheticDataset

# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def make_adam(store: ParameterStore, lr: float = 2e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps_opt: float = 1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps_opt=eps_opt, step=0,
        m={p.name: np.zeros_like(p.value) for p in store},
        v={p.name: np.zeros_like(p.value) for p in store})


def adam_step(store: ParameterStore, opt: AdamState) -> None:
    """Bias-corrected Adam update in registration order; zeroes gradients."""
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for p in store:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", where=p.name)
        m = opt.m[p.name]
        v = opt.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps_opt)
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckCase:
    """A scalar objective over a block's parameters with an analytic gradient."""

    params: list[Parameter]
    value: "callable"
    backward: "callable"       # zero grads, run forward+backward with the fixed weights
    sample_fraction: float | None = None


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    n_checked: int
    worst_param: str

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= 1e-4


def _weighted(rng: np.random.Generator, shape) -> Tensor:
    return rng.uniform(-1.0, 1.0, size=shape)


def _case_for_block(blk, inputs: tuple, rng: np.random.Generator,
                    multi_output: bool = False) -> GradCheckCase:
    out = blk.forward(*inputs)
    r = _weighted(rng, out.shape)

    def value():
        return float(np.sum(r * blk.forward(*inputs)))

    def backward():
        for p in blk.parameters:
            p.zero_grad()
        blk.forward(*inputs)
        blk.backward(r)

    return GradCheckCase(params=list(blk.parameters), value=value, backward=backward)


def _build_linear(seed):
    rng = np.random.default_rng(seed)
    blk = core.Linear("lin", 3, 2, rng)
    x = rng.standard_normal((4, 3))
    return _case_for_block(blk, (x,), rng)


def _build_feed_forward(seed):
    rng = np.random.default_rng(seed)
    blk = model.FeedForward("ff", 3, 5, rng)
    x = rng.standard_normal((2, 4, 3)) + 0.3
    case = _case_for_block(blk, (x,), rng)
    return case


def _build_gcn_layer(seed):
    rng = np.random.default_rng(seed)
    blk = graph.GcnLayer("gcn", 2, 3, rng)
    pos = rng.standard_normal((2, 3, 2))
    norm = graph.normalized_graphs(pos, 0.1, 2)
    h = rng.standard_normal((2, 3, 2)) + 0.2
    return _case_for_block(blk, (h, norm), rng)


def _build_full_attention(seed):
    rng = np.random.default_rng(seed)
    blk = attention.FullAttention("attn", 4, rng)
    x = rng.standard_normal((2, 5, 4))
    return _case_for_block(blk, (x,), rng)


def _build_diff_attention(seed):
    rng = np.random.default_rng(seed)
    blk = attention.DiffAttention("diff", 4, 2, rng)
    x = rng.standard_normal((2, 5, 4))
    return _case_for_block(blk, (x,), rng)


def _build_ldt_attention(seed):
    rng = np.random.default_rng(seed)
    blk = attention.LdtAttention("ldt", 3, 3, rng)
    x = rng.standard_normal((2, 7, 3)) + 0.4
    return _case_for_block(blk, (x,), rng)


def _build_film(seed):
    rng = np.random.default_rng(seed)
    blk = attention.Film("film", 3, 4, rng)
    x = rng.standard_normal((2, 5, 4))
    cond = rng.standard_normal((5, 3))
    out = blk.forward(x, cond)
    r = _weighted(rng, out.shape)

    def value():
        return float(np.sum(r * blk.forward(x, cond)))

    def backward():
        for p in blk.parameters:
            p.zero_grad()
        blk.forward(x, cond)
        blk.backward(r)

    return GradCheckCase(params=list(blk.parameters), value=value, backward=backward)


def _build_group_fusion(seed):
    rng = np.random.default_rng(seed)
    blk = model.GroupFusion("fusion", 3, 4, rng)
    x = rng.standard_normal((3, 4, 3))
    return _case_for_block(blk, (x,), rng)


def _build_timestep_embedding(seed):
    rng = np.random.default_rng(seed)
    blk = model.TimestepEmbedding("t_embed", 6, rng)
    r = _weighted(rng, (6,))
    t = 7.0

    def value():
        return float(np.sum(r * blk.forward(t)))

    def backward():
        for p in blk.parameters:
            p.zero_grad()
        blk.forward(t)
        blk.backward(r)

    return GradCheckCase(params=list(blk.parameters), value=value, backward=backward)


def _tiny_denoiser(seed):
    cfg = model.DenoiserConfig(
        d_in=4, d_model=8, gcn_layers=1, decoder_layers=2, heads=2, window=3,
        cond_dim=3, position_channels=(0, 1), max_dancers=4, ff_mult=2)
    net = model.Denoiser(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x_t = rng.standard_normal((2, 8, 4))
    music = rng.standard_normal((8, 3))
    return net, x_t, music, rng


def _build_output_head(seed):
    net, x_t, music, rng = _tiny_denoiser(seed)
    r = _weighted(rng, x_t.shape)

    def value():
        return float(np.sum(r * net.forward(x_t, music, 3)))

    def backward():
        net.store.zero_grads()
        net.forward(x_t, music, 3)
        net.backward(r)

    return GradCheckCase(params=list(net.head.parameters), value=value,
                         backward=backward)


def _build_end_to_end(seed):
    net, x_t, music, rng = _tiny_denoiser(seed)
    x0 = rng.standard_normal(x_t.shape)
    mask = (rng.uniform(size=(2, 8)) < 0.4).astype(float)
    w = diffusion.LossWeights(position_channels=(0, 1), contact_channels=(3,),
                              contact_mask=mask)

    def value():
        total, _ = diffusion.loss(x0, net.forward(x_t, music, 3), w)
        return total

    def backward():
        net.store.zero_grads()
        out = net.forward(x_t, music, 3)
        net.backward(diffusion.loss_grad(x0, out, w))

    return GradCheckCase(params=[p for p in net.store], value=value,
                         backward=backward, sample_fraction=0.05)


# check name -> (covered block class name or None, builder)
CHECKS: dict[str, tuple[str | None, "callable"]] = {
    "linear": ("Linear", _build_linear),
    "feed_forward": (None, _build_feed_forward),
    "gcn_layer": ("GcnLayer", _build_gcn_layer),
    "full_attention": ("FullAttention", _build_full_attention),
    "diff_attention": ("DiffAttention", _build_diff_attention),
    "ldt_attention": ("LdtAttention", _build_ldt_attention),
    "film": ("Film", _build_film),
    "group_fusion": ("GroupFusion", _build_group_fusion),
    "timestep_embedding": ("TimestepEmbedding", _build_timestep_embedding),
    "output_head": (None, _build_output_head),
    "end_to_end": (None, _build_end_to_end),
}


def uncovered_blocks() -> list[str]:
    """Learnable block classes with no gradient check (must be empty)."""
    covered = {cls for cls, _ in CHECKS.values() if cls is not None}
    return sorted(set(core.BLOCK_TYPES) - covered)


def grad_check(name: str, h: float = 1e-4, seed: int = 0,
               perturb: bool = False) -> GradCheckReport:
    """Compare analytic gradients of one registered check to central differences."""
    if name not in CHECKS:
        raise ConfigError(f"no gradient check registered under {name!r}")
    _, builder = CHECKS[name]
    case = builder(seed)
    case.backward()
    analytic = {p.name: p.grad.copy() for p in case.params}
    if perturb:
        first = case.params[0]
        analytic[first.name] = analytic[first.name] + 1e-2

    rng = np.random.default_rng(seed + 1234)
    max_err = 0.0
    worst = ""
    n_checked = 0
    for p in case.params:
        size = p.value.size
        if case.sample_fraction is None:
            idxs = np.arange(size)
        else:
            take = max(1, int(math.ceil(case.sample_fraction * size)))
            idxs = rng.choice(size, size=min(take, size), replace=False)
        flat = p.value.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = case.value()
            flat[i] = orig - h
            f_minus = case.value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[p.name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            n_checked += 1
            if err > max_err:
                max_err = err
                worst = f"{p.name}[{i}]"
    return GradCheckReport(name=name, max_rel_err=max_err, n_checked=n_checked,
                           worst_param=worst)


def run_all_checks(h: float = 1e-4, seed: int = 0) -> list[GradCheckReport]:
    return [grad_check(name, h=h, seed=seed) for name in CHECKS]


# ---------------------------------------------------------------------------
# toy training

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 0          # 0 = the whole (tiny) synthetic set
    lr: float = 2e-4
    lr_schedule: str = "step"    # "step": halve at each quarter of the run
    seed: int = 0
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.2
    lambda_pos: float = 1.0
    lambda_vel: float = 1.0
    lambda_contact: float = 1.0
    grad_clip: float = 0.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lr_schedule not in ("constant", "step"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return cfg.lr * 0.5 ** min(3, (4 * epoch) // cfg.epochs)


@dataclass
class EpochStats:
    epoch: int
    total: float
    simple: float
    pos: float
    vel: float
    contact: float


def write_loss_csv(history: list[EpochStats], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,total,simple,pos,vel,contact\n")
        for row in history:
            fh.write(f"{row.epoch},{row.total!r},{row.simple!r},{row.pos!r},"
                     f"{row.vel!r},{row.contact!r}\n")


def train_toy(dataset: SyntheticDataset, cfg: TrainConfig,
              model_cfg: "model.DenoiserConfig | None" = None,
              net: "model.Denoiser | None" = None,
              opt: AdamState | None = None, start_epoch: int = 0,
              out_dir=None, log=None):
    """Denoising training on the synthetic set; returns (net, opt, history).

    Each step draws a uniform timestep and fresh noise per sample, corrupts
    the clean motion, predicts it back, and applies one Adam update per
    batch. Deterministic given (seed, config, dataset); single-threaded.
    """
    if not dataset.samples:
        raise ConfigError("dataset is empty")
    if model_cfg is None:
        model_cfg = model.DenoiserConfig(
            d_in=dataset.d_in, cond_dim=dataset.cond_dim,
            position_channels=dataset.position_channels)
    if net is None:
        net = model.Denoiser(model_cfg, seed=cfg.seed)
    if opt is None:
        opt = make_adam(net.store, lr=cfg.lr)
    sched = diffusion.make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    d = dataset.d_in
    base_w = diffusion.LossWeights(
        lambda_pos=cfg.lambda_pos, lambda_vel=cfg.lambda_vel,
        lambda_contact=cfg.lambda_contact,
        position_channels=dataset.position_channels,
        contact_channels=(d - 2, d - 1))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xDA7A]))
    n = len(dataset.samples)
    history: list[EpochStats] = []
    step = start_epoch * max(1, n // (cfg.batch_size or n))
    clean = [dataset.normalized(i) for i in range(n)]

    with threadpool_limits(limits=1):
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            opt.lr = lr_at(cfg, epoch - start_epoch)
            order = rng.permutation(n)
            # timesteps stratified across the epoch: uniform marginal on [1, T],
            # far lower epoch-to-epoch variance in the mean loss
            strata = rng.permutation(n)
            ts = 1 + np.floor(
                (strata + rng.uniform(size=n)) / n * sched.T).astype(int)
            bs = cfg.batch_size if cfg.batch_size > 0 else n
            sums = np.zeros(5)
            n_batches = 0
            for b0 in range(0, n, bs):
                batch = order[b0:b0 + bs]
                net.store.zero_grads()
                batch_stats = np.zeros(5)
                for idx in batch:
                    x0 = clean[idx]
                    sample = dataset.samples[idx]
                    t = int(ts[idx])
                    noise = rng.standard_normal(x0.shape)
                    x_t = diffusion.q_sample(x0, t, noise, sched)
                    x0_hat = net.forward(x_t, sample.cond, t)
                    w = replace(base_w, contact_mask=sample.contact_mask)
                    total, parts = diffusion.loss(x0, x0_hat, w)
                    if not math.isfinite(total):
                        raise DivergenceError("loss is not finite", step=step)
                    net.backward(diffusion.loss_grad(x0, x0_hat, w) / len(batch))
                    batch_stats += np.array([total, *parts])
                if cfg.grad_clip > 0:
                    norm = math.sqrt(sum(float((p.grad ** 2).sum())
                                         for p in net.store))
                    if norm > cfg.grad_clip:
                        scale = cfg.grad_clip / norm
                        for p in net.store:
                            p.grad *= scale
                adam_step(net.store, opt)
                step += 1
                sums += batch_stats / len(batch)
                n_batches += 1
            mean = sums / n_batches
            history.append(EpochStats(epoch, *(float(v) for v in mean)))
            if log is not None:
                log(history[-1])
            if out_dir is not None and cfg.checkpoint_every > 0 and \
                    (epoch + 1 - start_epoch) % cfg.checkpoint_every == 0:
                _save_train_checkpoint(out_dir, net, opt, dataset)
    return net, opt, history


def _save_train_checkpoint(out_dir, net, opt, dataset):
    import os

    from .data import channel_names
    extras = {
        "data.mean": ",".join(repr(float(v)) for v in dataset.mean),
        "data.std": ",".join(repr(float(v)) for v in dataset.std),
        "data.channel_names": ",".join(channel_names(dataset.d_in)),
    }
    model.save_checkpoint(
        os.path.join(out_dir, "model.ckpt"), net.config_lines(), net.store,
        extras=extras,
        opt_state={"step": opt.step, "m": opt.m, "v": opt.v})

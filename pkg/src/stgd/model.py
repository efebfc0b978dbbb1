"""The spatial-temporal denoiser: group fusion, per-frame graph
convolution over dancers, then a per-dancer temporal decoder conditioned on
music and the diffusion timestep.

The temporal decoder alternates differential-attention layers with
windowed linear-attention layers (content filtering first, then local
aggregation). Each layer is pre-normalized with residual connections and a
FiLM modulation driven by the shared conditioning stream. The model
predicts the clean sample, not the noise, so position/velocity/contact
losses apply directly to its output.

Checkpoints are single binary files with the "STGD-CKPT-1" header: a
human-readable key=value config block, a blank line, then named float64
parameter payloads (little-endian), optionally followed by optimizer state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import core
from .attention import DiffAttention, Film, LdtAttention
from .core import Block, Linear, LayerNorm, ParameterStore, Tensor, matmul, relu
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .graph import GcnLayer, default_top_k, normalized_graphs

CKPT_MAGIC = "STGD-CKPT-1"


@dataclass
class DenoiserConfig:
    d_in: int = 8
    d_model: int = 64
    gcn_layers: int = 2
    decoder_layers: int = 4
    heads: int = 4
    window: int = 64
    top_k: int = 0              # 0 = automatic budget (no pruning up to 8 dancers)
    epsilon: float = 0.1
    cond_dim: int = 16
    position_channels: tuple[int, int] = (0, 1)
    max_dancers: int = 8
    ff_mult: int = 2

    def __post_init__(self):
        if self.decoder_layers < 2 or self.decoder_layers % 2 != 0:
            raise ConfigError("decoder_layers must be even and >= 2")
        if self.d_model % self.heads != 0:
            raise ConfigError("d_model must be divisible by heads")
        if self.gcn_layers < 1:
            raise ConfigError("gcn_layers must be >= 1")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.cond_dim < 1:
            raise ConfigError("cond_dim must be >= 1")
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even (timestep embedding)")
        pc = tuple(int(c) for c in self.position_channels)
        if len(pc) != 2 or pc[0] == pc[1] or not all(0 <= c < self.d_in for c in pc):
            raise ConfigError(f"position_channels {pc} invalid for d_in={self.d_in}")
        self.position_channels = pc

    def edge_budget(self, n_dancers: int) -> int:
        if self.top_k > 0:
            return min(self.top_k, max(1, n_dancers - 1))
        return default_top_k(n_dancers)


class GroupFusion(Block):
    """Adds a learned per-dancer identity embedding and a shared linear mix.

    Distinct embeddings deliberately break permutation symmetry between
    dancers; with equal rows the block is permutation-equivariant.
    """

    def __init__(self, name: str, d: int, max_dancers: int, rng: np.random.Generator,
                 emb_scale: float = 0.1):
        super().__init__()
        self.max_dancers = max_dancers
        self.emb = self._param(f"{name}.emb",
                               emb_scale * rng.standard_normal((max_dancers, d)))
        self.w = self._param(f"{name}.w", core.glorot(rng, d, d))
        self.b = self._param(f"{name}.b", np.zeros(d))
        self._h: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        if n > self.max_dancers:
            raise ConfigError(
                f"{n} dancers exceeds the identity table size {self.max_dancers}")
        self._n = n
        self._h = x + self.emb.value[:n, None, :]
        return matmul(self._h, self.w.value) + self.b.value

    def backward(self, g: Tensor) -> Tensor:
        d = g.shape[-1]
        h2 = self._h.reshape(-1, d)
        g2 = np.asarray(g).reshape(-1, d)
        self.w.grad += matmul(h2.T, g2)
        self.b.grad += g2.sum(axis=0)
        dh = matmul(g, self.w.value.T)
        self.emb.grad[:self._n] += dh.sum(axis=1)
        return dh


def sinusoid(t: float, dim: int) -> Tensor:
    """Interleaved sin/cos embedding over geometric frequencies."""
    if dim % 2 != 0:
        raise ConfigError(f"timestep embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    out = np.empty(dim)
    out[0::2] = np.sin(t * freqs)
    out[1::2] = np.cos(t * freqs)
    return out


class TimestepEmbedding(Block):
    """Sinusoidal embedding of the diffusion step, then a learned projection."""

    def __init__(self, name: str, dim: int, rng: np.random.Generator):
        super().__init__()
        if dim % 2 != 0:
            raise ConfigError(f"timestep embedding dim must be even, got {dim}")
        self.dim = dim
        self.w = self._param(f"{name}.w", core.glorot(rng, dim, dim))
        self.b = self._param(f"{name}.b", np.zeros(dim))
        self._s: Tensor | None = None

    def forward(self, t: float) -> Tensor:
        self._s = sinusoid(t, self.dim)
        return matmul(self._s[None, :], self.w.value)[0] + self.b.value

    def backward(self, g: Tensor) -> None:
        self.w.grad += np.outer(self._s, g)
        self.b.grad += g


class FeedForward:
    """Two linear maps with a ReLU between; owns no parameters directly."""

    def __init__(self, name: str, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(f"{name}.fc1", d, hidden, rng)
        self.fc2 = Linear(f"{name}.fc2", hidden, d, rng)
        self._pre: Tensor | None = None

    @property
    def parameters(self):
        return self.fc1.parameters + self.fc2.parameters

    def forward(self, x: Tensor) -> Tensor:
        self._pre = self.fc1.forward(x)
        return self.fc2.forward(relu(self._pre))

    def backward(self, g: Tensor) -> Tensor:
        dh = self.fc2.backward(g)
        return self.fc1.backward(np.where(self._pre > 0, dh, 0.0))


class DecoderLayer:
    """Pre-norm attention, FiLM modulation, pre-norm feed-forward."""

    def __init__(self, name: str, cfg: DenoiserConfig, kind: str,
                 rng: np.random.Generator):
        d = cfg.d_model
        self.kind = kind
        if kind == "diff":
            self.attn = DiffAttention(f"{name}.attn", d, cfg.heads, rng)
            self.out_proj = Linear(f"{name}.attn_out", 2 * d, d, rng)
        elif kind == "ldt":
            self.attn = LdtAttention(f"{name}.attn", d, cfg.window, rng)
            self.out_proj = None
        else:
            raise ConfigError(f"unknown decoder layer kind {kind!r}")
        self.film = Film(f"{name}.film", d, d, rng, zero_init=True)
        self.ff = FeedForward(f"{name}.ff", d, cfg.ff_mult * d, rng)
        self.ln1 = LayerNorm()
        self.ln2 = LayerNorm()

    @property
    def parameters(self):
        ps = list(self.attn.parameters)
        if self.out_proj is not None:
            ps += self.out_proj.parameters
        return ps + self.film.parameters + self.ff.parameters

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        a = self.attn.forward(self.ln1.forward(x))
        if self.out_proj is not None:
            a = self.out_proj.forward(a)
        x1 = x + a
        x2 = self.film.forward(x1, cond)
        return x2 + self.ff.forward(self.ln2.forward(x2))

    def backward(self, g: Tensor) -> tuple[Tensor, Tensor]:
        dx2 = g + self.ln2.backward(self.ff.backward(g))
        dx1, dcond = self.film.backward(dx2)
        da = dx1
        if self.out_proj is not None:
            da = self.out_proj.backward(da)
        dx = dx1 + self.ln1.backward(self.attn.backward(da))
        return dx, dcond


class Denoiser:
    """Full clean-sample predictor. Owns all parameters in a ParameterStore."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.in_proj = Linear("in_proj", cfg.d_in, d, rng)
        self.fusion = GroupFusion("fusion", d, cfg.max_dancers, rng)
        self.gcn = [GcnLayer(f"gcn.{i}", d, d, rng) for i in range(cfg.gcn_layers)]
        self.t_embed = TimestepEmbedding("t_embed", d, rng)
        self.cond_proj = Linear("cond_proj", cfg.cond_dim + d, d, rng)
        kinds = ["diff", "ldt"] * (cfg.decoder_layers // 2)
        self.layers = [DecoderLayer(f"layers.{i}", cfg, kind, rng)
                       for i, kind in enumerate(kinds)]
        self.head = Linear("head", d, cfg.d_in, rng)

        self.store = ParameterStore()
        for blk in ([self.in_proj, self.fusion] + self.gcn
                    + [self.t_embed, self.cond_proj] + self.layers + [self.head]):
            for p in blk.parameters:
                self.store.register(p)
        self._cache = None

    # -- forward ----------------------------------------------------------

    def forward(self, x_t: Tensor, music: Tensor, t: int) -> Tensor:
        cfg = self.cfg
        x_t = np.asarray(x_t, dtype=np.float64)
        music = np.asarray(music, dtype=np.float64)
        if x_t.ndim != 3 or x_t.shape[2] != cfg.d_in:
            raise ShapeError(f"motion must be (N, L, {cfg.d_in}), got {x_t.shape}")
        n, length, _ = x_t.shape
        if music.shape != (length, cfg.cond_dim):
            raise ShapeError(
                f"conditioning must be ({length}, {cfg.cond_dim}), got {music.shape}")

        pos = np.ascontiguousarray(
            x_t[:, :, list(cfg.position_channels)].transpose(1, 0, 2))
        core.require_finite(pos, "denoiser.positions")
        with core.mac_scope("spatial"):
            norm = normalized_graphs(pos, cfg.epsilon, cfg.edge_budget(n))

        h = self.in_proj.forward(x_t)
        h = self.fusion.forward(h)
        core.require_finite(h, "denoiser.fusion")

        with core.mac_scope("spatial"):
            hs = np.ascontiguousarray(h.transpose(1, 0, 2))
            for i, layer in enumerate(self.gcn):
                hs = layer.forward(hs, norm)
                core.require_finite(hs, f"denoiser.gcn.{i}")
        h = np.ascontiguousarray(hs.transpose(1, 0, 2))

        tfeat = self.t_embed.forward(float(t))
        cond_raw = np.concatenate(
            [music, np.broadcast_to(tfeat, (length, cfg.d_model))], axis=1)
        cond = self.cond_proj.forward(cond_raw)

        with core.mac_scope("temporal"):
            for i, layer in enumerate(self.layers):
                h = layer.forward(h, cond)
                core.require_finite(h, f"denoiser.layers.{i}")

        out = self.head.forward(h)
        core.require_finite(out, "denoiser.head")
        self._cache = (n, length)
        return out

    def backward(self, g: Tensor) -> None:
        """Accumulate parameter gradients for the last forward pass."""
        cfg = self.cfg
        n, length = self._cache
        dh = self.head.backward(g)
        dcond = np.zeros((length, cfg.d_model))
        for layer in reversed(self.layers):
            dh, dc = layer.backward(dh)
            dcond += dc
        dcond_raw = self.cond_proj.backward(dcond)
        self.t_embed.backward(dcond_raw[:, cfg.cond_dim:].sum(axis=0))

        dhs = np.ascontiguousarray(dh.transpose(1, 0, 2))
        for layer in reversed(self.gcn):
            dhs = layer.backward(dhs)
        dh = np.ascontiguousarray(dhs.transpose(1, 0, 2))
        dh = self.fusion.backward(dh)
        self.in_proj.backward(dh)

    # -- checkpointing ------------------------------------------------------

    def config_lines(self) -> dict[str, str]:
        out = {}
        for f in fields(self.cfg):
            v = getattr(self.cfg, f.name)
            if isinstance(v, tuple):
                out[f.name] = ",".join(str(c) for c in v)
            else:
                out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    @staticmethod
    def config_from_lines(lines: dict[str, str]) -> DenoiserConfig:
        kw = {}
        for f in fields(DenoiserConfig):
            if f.name not in lines:
                raise FormatError(f"checkpoint config missing key {f.name!r}")
            raw = lines[f.name]
            if f.name == "position_channels":
                kw[f.name] = tuple(int(c) for c in raw.split(","))
            elif f.type in ("float", float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
        return DenoiserConfig(**kw)


# ---------------------------------------------------------------------------
# checkpoint I/O

def _write_tensor(fh, arr: np.ndarray):
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated checkpoint", offset=fh.tell())
    return data


def _read_tensor(fh) -> np.ndarray:
    ndim = struct.unpack("<I", _read_exact(fh, 4))[0]
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_checkpoint(path, config_lines: dict[str, str], store: ParameterStore,
                    extras: dict[str, str] | None = None,
                    opt_state: "dict | None" = None) -> None:
    """Write config + parameters (+ optional optimizer moments) to ``path``."""
    with open(path, "wb") as fh:
        fh.write((CKPT_MAGIC + "\n").encode())
        for k, v in config_lines.items():
            fh.write(f"{k}={v}\n".encode())
        for k in sorted(extras or {}):
            fh.write(f"{k}={(extras or {})[k]}\n".encode())
        fh.write(b"\n")
        names = store.names()
        fh.write(struct.pack("<Q", len(names)))
        for name in names:
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            _write_tensor(fh, store[name].value)
        if opt_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", opt_state["step"]))
            for name in names:
                _write_tensor(fh, opt_state["m"][name])
                _write_tensor(fh, opt_state["v"][name])


def load_checkpoint(path):
    """Read a checkpoint; returns (config_lines, params, opt_state_or_None)."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode(errors="replace").rstrip("\n")
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
        lines: dict[str, str] = {}
        while True:
            pos = fh.tell()
            row = fh.readline().decode(errors="replace")
            if row == "":
                raise FormatError("missing header terminator", offset=pos)
            row = row.rstrip("\n")
            if row == "":
                break
            if "=" not in row:
                raise FormatError(f"malformed header line {row!r}", offset=pos)
            k, v = row.split("=", 1)
            lines[k] = v
        n_params = struct.unpack("<Q", _read_exact(fh, 8))[0]
        params: dict[str, np.ndarray] = {}
        order: list[str] = []
        for _ in range(n_params):
            n_name = struct.unpack("<I", _read_exact(fh, 4))[0]
            name = _read_exact(fh, n_name).decode()
            params[name] = _read_tensor(fh)
            order.append(name)
        has_opt = struct.unpack("<B", _read_exact(fh, 1))[0]
        opt_state = None
        if has_opt:
            step = struct.unpack("<Q", _read_exact(fh, 8))[0]
            m = {name: _read_tensor(fh) for name in order}
            v = {name: _read_tensor(fh) for name in order}
            opt_state = {"step": int(step), "m": m, "v": v}
    return lines, params, opt_state


def restore_denoiser(path) -> tuple[Denoiser, dict[str, str], "dict | None"]:
    """Rebuild a Denoiser from a checkpoint file."""
    lines, params, opt_state = load_checkpoint(path)
    cfg = Denoiser.config_from_lines(lines)
    model = Denoiser(cfg, seed=0)
    for p in model.store:
        if p.name not in params:
            raise FormatError(f"checkpoint missing parameter {p.name!r}")
        if params[p.name].shape != p.value.shape:
            raise FormatError(
                f"parameter {p.name!r} shape {params[p.name].shape} != "
                f"expected {p.value.shape}")
        p.value[...] = params[p.name]
    return model, lines, opt_state

"""Synthetic group-choreography data and the motion file format.

Four root-trajectory styles are generated analytically so that the minimum
pairwise dancer distance stays above a configured clearance on every frame:

* ``circle``    — dancers equally spaced on a rotating ring.
* ``line``      — a rigid line of dancers orbiting a small loop.
* ``figure8``   — translated copies tracing a figure-eight path.
* ``crossover`` — dancers sharing one figure-eight with staggered phases,
  so their paths cross in space but never in time.

Seeds only rotate/translate the formation rigidly and shift phases, which
preserves pairwise distances. Remaining channels are smooth tempo-locked
sinusoids. Conditioning per frame is [sin beat, cos beat, style one-hot,
tempo]. Motion files ("STGD-MOT-1") carry a text header with per-channel
statistics followed by little-endian float64 payloads.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import Tensor, as_tensor
from .errors import ConfigError, FormatError

MOT_MAGIC = "STGD-MOT-1"

STYLES = ("circle", "line", "figure8", "crossover")
COND_DIM = 2 + len(STYLES) + 1

PRESETS = {
    "short": {"n_dancers": 3, "length": 120},
    "long": {"n_dancers": 3, "length": 400},
}


@dataclass
class Sample:
    """One synthetic clip in raw scene units."""

    motion: Tensor                 # (N, L, d)
    cond: Tensor                   # (L, COND_DIM)
    contact_mask: Tensor           # (N, L)
    style: str
    tempo: float
    seed: int
    style_params: dict = field(default_factory=dict)


def min_pairwise_distance(positions: Tensor) -> float:
    """Smallest inter-dancer root distance over all frames; (N, L, 2) input."""
    n = positions.shape[0]
    if n < 2:
        return math.inf
    best = math.inf
    for i in range(n):
        for j in range(i + 1, n):
            diff = positions[i] - positions[j]
            d2 = diff[:, 0] ** 2 + diff[:, 1] ** 2
            best = min(best, float(np.sqrt(d2.min())))
    return best


def _gerono(phi: np.ndarray, a: float) -> np.ndarray:
    return np.stack([a * np.sin(phi), a * np.sin(phi) * np.cos(phi)], axis=-1)


def _limit_tempo(tempo: float, max_speed: float) -> float:
    """Cap the beat rate so per-frame displacement stays below 1 scene unit."""
    if max_speed <= 0:
        return tempo
    return min(tempo, 0.9 / (2.0 * math.pi * max_speed))


def _root_tracks(style: str, n: int, length: int, tempo: float, clearance: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, float, dict]:
    phase0 = rng.uniform(0.0, 2.0 * math.pi)
    if style == "circle":
        radius = max(1.5, 1.2 * clearance / (2.0 * math.sin(math.pi / n))) if n > 1 else 1.5
        tempo = _limit_tempo(tempo, radius)
        phi = phase0 + 2.0 * math.pi * tempo * np.arange(length)
        ang = phi[None, :] + 2.0 * math.pi * np.arange(n)[:, None] / n
        pos = radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        params = {"radius": radius}
    elif style == "line":
        spacing = max(1.5 * clearance, min(1.0, 14.0 / max(n - 1, 1)))
        loop_r = 0.8
        tempo = _limit_tempo(tempo, loop_r)
        phi = phase0 + 2.0 * math.pi * tempo * np.arange(length)
        center = loop_r * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
        offs = spacing * (np.arange(n) - (n - 1) / 2.0)
        pos = center[None, :, :] + np.stack(
            [offs, np.zeros(n)], axis=-1)[:, None, :]
        params = {"spacing": spacing}
    elif style == "figure8":
        amp = 2.0
        spacing = max(1.0, 1.5 * clearance)
        tempo = _limit_tempo(tempo, amp * math.sqrt(2.0))
        phi = phase0 + 2.0 * math.pi * tempo * np.arange(length)
        base = _gerono(phi, amp)
        offs = spacing * (np.arange(n) - (n - 1) / 2.0)
        pos = base[None, :, :] + np.stack(
            [np.zeros(n), offs], axis=-1)[:, None, :]
        params = {"amplitude": amp, "spacing": spacing}
    elif style == "crossover":
        amp = max(2.0, 5.2 * n * clearance / math.pi)
        tempo = _limit_tempo(tempo, amp * math.sqrt(2.0))
        phi = phase0 + 2.0 * math.pi * tempo * np.arange(length)
        stagger = np.zeros(n)
        if n % 2 == 0:
            stagger[1::2] = math.pi / (2.0 * n)
        rho = 2.0 * math.pi * np.arange(n) / n + stagger
        pos = _gerono(phi[None, :] + rho[:, None], amp)
        params = {"amplitude": amp}
    else:
        raise ConfigError(f"unknown style {style!r}; choose from {STYLES}")
    return pos, tempo, params


def make_conditioning(length: int, style: str, tempo: float) -> Tensor:
    """Per-frame conditioning: [sin beat, cos beat, style one-hot, tempo].

    Deterministic in its arguments, so generation can reproduce the exact
    conditioning the training clips carried.
    """
    if style not in STYLES:
        raise ConfigError(f"unknown style {style!r}; choose from {STYLES}")
    beat = 2.0 * math.pi * tempo * (np.arange(length) + 1.0)
    onehot = np.zeros((length, len(STYLES)))
    onehot[:, STYLES.index(style)] = 1.0
    return np.concatenate(
        [np.sin(beat)[:, None], np.cos(beat)[:, None], onehot,
         np.full((length, 1), tempo)], axis=1)


def gen_synthetic(n_dancers: int, length: int, style: str = "circle",
                  tempo: float = 0.05, seed: int = 0, d_in: int = 8,
                  clearance: float = 0.1) -> Sample:
    """Generate one collision-free clip with smooth bounded channels."""
    if n_dancers < 1:
        raise ConfigError("need at least one dancer")
    if length < 2:
        raise ConfigError("need at least two frames")
    if d_in < 3:
        raise ConfigError("d_in must leave room for limb channels (>= 3)")
    if style not in STYLES:
        raise ConfigError(f"unknown style {style!r}; choose from {STYLES}")
    rng = np.random.default_rng(seed)
    pos, tempo_eff, params = _root_tracks(
        style, n_dancers, length, tempo, clearance, rng)

    # rigid scene transform: preserves every pairwise distance
    theta = rng.uniform(0.0, 2.0 * math.pi)
    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    shift = rng.uniform(-1.5, 1.5, size=2)
    pos = pos @ rot.T + shift

    phase = (2.0 * math.pi * tempo_eff * np.arange(length)
             + rng.uniform(0.0, 2.0 * math.pi))
    n_limb = d_in - 2
    mults = np.array([(0.5, 1.0, 2.0)[j % 3] for j in range(n_limb)])
    amps = rng.uniform(0.4, 0.8, size=n_limb)
    psis = rng.uniform(0.0, 2.0 * math.pi, size=(n_dancers, n_limb))
    limbs = amps[None, None, :] * np.sin(
        mults[None, None, :] * phase[None, :, None] + psis[:, None, :])

    motion = np.concatenate([pos, limbs], axis=2)
    if np.abs(motion).max() > 10.0:
        raise ConfigError(
            f"style {style!r} with {n_dancers} dancers exceeds the scene bound; "
            "reduce dancers or clearance")
    if n_dancers >= 2:
        got = min_pairwise_distance(pos)
        if got < clearance:
            raise ConfigError(
                f"style {style!r} violates clearance: {got:.4f} < {clearance}")

    cond = make_conditioning(length, style, tempo_eff)
    return Sample(
        motion=as_tensor(motion), cond=as_tensor(cond),
        contact_mask=np.zeros((n_dancers, length)),
        style=style, tempo=tempo_eff, seed=seed, style_params=params)


CHANNEL_PREFIX = ("root_x", "root_y")


def channel_names(d_in: int) -> list[str]:
    return list(CHANNEL_PREFIX) + [f"limb_{j}" for j in range(d_in - 2)]


@dataclass
class SyntheticDataset:
    """Samples plus the pooled per-channel statistics used for training."""

    samples: list[Sample]
    mean: Tensor
    std: Tensor
    position_channels: tuple[int, int]
    clearance: float
    seed: int

    @property
    def d_in(self) -> int:
        return self.samples[0].motion.shape[2]

    @property
    def cond_dim(self) -> int:
        return self.samples[0].cond.shape[1]

    def normalized(self, i: int) -> Tensor:
        return (self.samples[i].motion - self.mean) / self.std

    def denormalize(self, motion: Tensor) -> Tensor:
        return motion * self.std + self.mean


def make_dataset(n_samples: int = 8, n_dancers: int = 3, length: int = 120,
                 d_in: int = 8, styles: tuple[str, ...] = STYLES,
                 tempo: float = 0.05, seed: int = 0,
                 clearance: float = 0.1) -> SyntheticDataset:
    if n_samples < 1:
        raise ConfigError("need at least one sample")
    ss = np.random.SeedSequence(seed)
    child_seeds = ss.generate_state(n_samples)
    samples = [
        gen_synthetic(n_dancers, length, styles[i % len(styles)], tempo,
                      int(child_seeds[i]), d_in, clearance)
        for i in range(n_samples)
    ]
    stack = np.concatenate([s.motion.reshape(-1, d_in) for s in samples], axis=0)
    mean = stack.mean(axis=0)
    std = np.maximum(stack.std(axis=0), 1e-6)
    return SyntheticDataset(samples=samples, mean=mean, std=std,
                            position_channels=(0, 1), clearance=clearance,
                            seed=seed)


# ---------------------------------------------------------------------------
# motion file format

@dataclass
class MotionFile:
    """In-memory image of one STGD-MOT-1 file."""

    motion: Tensor                  # (N, L, d), stored exactly as given
    cond: Tensor                    # (L, c)
    contact_mask: Tensor            # (N, L)
    mean: Tensor                    # (d,)
    std: Tensor                     # (d,)
    position_channels: tuple[int, int] = (0, 1)
    names: list[str] = field(default_factory=list)
    extras: dict[str, str] = field(default_factory=dict)

    def denormalized(self) -> Tensor:
        return self.motion * self.std + self.mean


def motion_file_from_sample(ds: SyntheticDataset, i: int) -> MotionFile:
    s = ds.samples[i]
    return MotionFile(
        motion=ds.normalized(i), cond=s.cond, contact_mask=s.contact_mask,
        mean=ds.mean, std=ds.std, position_channels=ds.position_channels,
        names=channel_names(ds.d_in),
        extras={"style": s.style, "tempo": repr(s.tempo), "seed": str(s.seed)})


def _fmt_floats(a: Tensor) -> str:
    return ",".join(repr(float(v)) for v in a)


def _payload(fh, arr: Tensor):
    fh.write(struct.pack("<Q", arr.size))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_motion(mf: MotionFile, path) -> None:
    """Atomic whole-file write (temp file + rename)."""
    n, length, d = mf.motion.shape
    c = mf.cond.shape[1]
    header = [
        MOT_MAGIC,
        f"n_dancers={n}",
        f"n_frames={length}",
        f"n_channels={d}",
        f"cond_channels={c}",
        f"channel_names={','.join(mf.names or channel_names(d))}",
        f"position_channels={mf.position_channels[0]},{mf.position_channels[1]}",
        f"mean={_fmt_floats(mf.mean)}",
        f"std={_fmt_floats(mf.std)}",
    ]
    header += [f"{k}={mf.extras[k]}" for k in sorted(mf.extras)]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n\n").encode())
        _payload(fh, mf.motion)
        _payload(fh, mf.cond)
        _payload(fh, mf.contact_mask)
    os.replace(tmp, path)


def _read_block(fh, shape, what: str) -> Tensor:
    pos = fh.tell()
    raw = fh.read(8)
    if len(raw) != 8:
        raise FormatError(f"truncated {what} length field", offset=pos)
    count = struct.unpack("<Q", raw)[0]
    expected = int(np.prod(shape))
    if count != expected:
        raise FormatError(
            f"{what} payload holds {count} values, header implies {expected}",
            offset=pos)
    data = fh.read(8 * count)
    if len(data) != 8 * count:
        raise FormatError(f"truncated {what} payload", offset=fh.tell())
    return np.frombuffer(data, dtype="<f8").reshape(shape).copy()


def load_motion(path) -> MotionFile:
    with open(path, "rb") as fh:
        magic = fh.readline().decode(errors="replace").rstrip("\n")
        if magic != MOT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MOT_MAGIC!r}", offset=0)
        fields_: dict[str, str] = {}
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
            fields_[k] = v
        try:
            n = int(fields_.pop("n_dancers"))
            length = int(fields_.pop("n_frames"))
            d = int(fields_.pop("n_channels"))
            c = int(fields_.pop("cond_channels"))
            names = fields_.pop("channel_names").split(",")
            pc = tuple(int(x) for x in fields_.pop("position_channels").split(","))
            mean = np.array([float(x) for x in fields_.pop("mean").split(",")])
            std = np.array([float(x) for x in fields_.pop("std").split(",")])
        except KeyError as err:
            raise FormatError(f"header missing field {err}", offset=fh.tell()) from err
        if mean.shape != (d,) or std.shape != (d,):
            raise FormatError("per-channel statistics do not match n_channels",
                              offset=fh.tell())
        motion = _read_block(fh, (n, length, d), "motion")
        cond = _read_block(fh, (length, c), "conditioning")
        mask = _read_block(fh, (n, length), "contact mask")
    return MotionFile(motion=motion, cond=cond, contact_mask=mask, mean=mean,
                      std=std, position_channels=(pc[0], pc[1]), names=names,
                      extras=fields_)


def export_csv(motion: Tensor, path) -> None:
    """Long-format dump: frame, dancer, channel, value."""
    n, length, d = motion.shape
    with open(path, "w") as fh:
        fh.write("frame,dancer,channel,value\n")
        for l in range(length):
            for i in range(n):
                for ch in range(d):
                    fh.write(f"{l},{i},{ch},{motion[i, l, ch]!r}\n")

"""DDPM machinery: schedule, forward corruption, reverse sampling, and the
four-term training loss.

The denoiser predicts the clean sample, so the reverse step uses the
Gaussian posterior mean written in terms of x̂₀ with the posterior variance
β̃_t = β_t (1-ᾱ_{t-1}) / (1-ᾱ_t). Steps are indexed t ∈ [1, T]; schedule
arrays are zero-based (beta[t-1] belongs to step t) and ᾱ₀ := 1, which
makes the final step (t=1) return x̂₀ exactly with no noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Tensor
from .errors import ConfigError, NumericError, ShapeError


@dataclass
class NoiseSchedule:
    T: int
    beta: Tensor
    alpha: Tensor
    alpha_bar: Tensor

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t <= 1 else float(self.alpha_bar[t - 2])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear β interpolation with a cumulative-product ᾱ."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t: int, T: int):
    if not (1 <= t <= T):
        raise ConfigError(f"step t={t} outside [1, {T}]")


def q_sample(x0: Tensor, t: int, noise: Tensor, s: NoiseSchedule) -> Tensor:
    """Closed-form forward marginal: √ᾱ_t x0 + √(1-ᾱ_t) noise."""
    _check_t(t, s.T)
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = s.alpha_bar[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def posterior_coeffs(s: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """(coefficient on x̂₀, coefficient on x_t, variance) of q(x_{t-1}|x_t, x̂₀)."""
    _check_t(t, s.T)
    beta_t = float(s.beta[t - 1])
    ab_t = float(s.alpha_bar[t - 1])
    ab_prev = s.alpha_bar_prev(t)
    c0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = np.sqrt(float(s.alpha[t - 1])) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0, ct, var


def p_sample_step(x_t: Tensor, t: int, x0_hat: Tensor, s: NoiseSchedule,
                  rng_seed) -> Tensor:
    """Sample x_{t-1} from the posterior around the predicted clean sample.

    At t=1 the noise term is suppressed, so the final step is deterministic.
    ``rng_seed`` is anything ``np.random.default_rng`` accepts.
    """
    if t < 1:
        raise ConfigError(f"reverse step needs t >= 1, got {t}")
    _check_t(t, s.T)
    x_t = np.asarray(x_t)
    x0_hat = np.asarray(x0_hat)
    if x0_hat.shape != x_t.shape:
        raise ShapeError(f"x0_hat shape {x0_hat.shape} != x_t shape {x_t.shape}")
    c0, ct, var = posterior_coeffs(s, t)
    mean = c0 * x0_hat + ct * x_t
    if t == 1:
        return mean
    rng = np.random.default_rng(rng_seed)
    return mean + np.sqrt(var) * rng.standard_normal(x_t.shape)


def generate(music: Tensor, n_dancers: int, length: int, denoiser,
             s: NoiseSchedule, seed: int) -> Tensor:
    """Full reverse loop from pure noise.

    ``denoiser`` needs ``forward(x_t, music, t)`` and a ``cfg.d_in``; any
    object with that surface works, including plug-in oracles in tests.
    """
    d_in = denoiser.cfg.d_in
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(s.T + 1)
    rng = np.random.default_rng(children[0])
    x = rng.standard_normal((n_dancers, length, d_in))
    for t in range(s.T, 0, -1):
        try:
            x0_hat = denoiser.forward(x, music, t)
            x = p_sample_step(x, t, x0_hat, s, children[t])
        except NumericError as err:
            raise NumericError(str(err), where=f"generate step t={t}") from err
    return x


# ---------------------------------------------------------------------------
# training loss

@dataclass
class LossWeights:
    """Weights and channel layout for the reconstruction loss."""

    lambda_pos: float = 1.0
    lambda_vel: float = 1.0
    lambda_contact: float = 1.0
    position_channels: tuple[int, int] = (0, 1)
    contact_channels: tuple[int, ...] = ()
    contact_mask: Tensor | None = None

    def __post_init__(self):
        if min(self.lambda_pos, self.lambda_vel, self.lambda_contact) < 0:
            raise ConfigError("loss weights must be nonnegative")


def _velocity(x: Tensor) -> Tensor:
    return x[:, 1:, :] - x[:, :-1, :]


def _contact_gate(w: LossWeights, n: int, length: int) -> Tensor | None:
    """Mask over frame transitions; a contact at the destination frame pins it."""
    if w.contact_mask is None or not w.contact_channels:
        return None
    mask = np.asarray(w.contact_mask, dtype=np.float64)
    if mask.shape != (n, length):
        raise ShapeError(f"contact mask shape {mask.shape} != ({n}, {length})")
    return mask[:, 1:]


def loss(x0: Tensor, x0_hat: Tensor, w: LossWeights) -> tuple[float, tuple[float, float, float, float]]:
    """Total loss and its (simple, pos, vel, contact) parts.

    simple: MSE over all channels. pos: MSE over the root-position channels.
    vel: MSE between first frame differences. contact: mean squared predicted
    velocity on contact channels over masked transitions (0 if none masked).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if x0.shape != x0_hat.shape:
        raise ShapeError(f"shape mismatch {x0.shape} vs {x0_hat.shape}")
    n, length, _ = x0.shape
    resid = x0_hat - x0
    l_simple = float(np.mean(resid ** 2))
    pc = list(w.position_channels)
    l_pos = float(np.mean(resid[:, :, pc] ** 2))
    dv = _velocity(x0_hat) - _velocity(x0)
    l_vel = float(np.mean(dv ** 2)) if length > 1 else 0.0
    gate = _contact_gate(w, n, length)
    if gate is None or gate.sum() == 0 or length < 2:
        l_contact = 0.0
    else:
        cv = _velocity(x0_hat)[:, :, list(w.contact_channels)]
        num = float(((cv ** 2) * gate[:, :, None]).sum())
        l_contact = num / (gate.sum() * len(w.contact_channels))
    total = (l_simple + w.lambda_pos * l_pos + w.lambda_vel * l_vel
             + w.lambda_contact * l_contact)
    return total, (l_simple, l_pos, l_vel, l_contact)


def loss_grad(x0: Tensor, x0_hat: Tensor, w: LossWeights) -> Tensor:
    """d(total)/d(x0_hat), matching :func:`loss` exactly."""
    x0 = np.asarray(x0, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    n, length, d = x0.shape
    resid = x0_hat - x0
    g = 2.0 * resid / resid.size
    pc = list(w.position_channels)
    g[:, :, pc] += w.lambda_pos * 2.0 * resid[:, :, pc] / (n * length * len(pc))
    if length > 1:
        dv = _velocity(x0_hat) - _velocity(x0)
        gv = w.lambda_vel * 2.0 * dv / dv.size
        g[:, 1:, :] += gv
        g[:, :-1, :] -= gv
    gate = _contact_gate(w, n, length)
    if gate is not None and gate.sum() > 0 and length > 1:
        cc = list(w.contact_channels)
        cv = _velocity(x0_hat)[:, :, cc]
        gc = (w.lambda_contact * 2.0 * cv * gate[:, :, None]
              / (gate.sum() * len(cc)))
        gfull = np.zeros((n, length - 1, d))
        gfull[:, :, cc] = gc
        g[:, 1:, :] += gfull
        g[:, :-1, :] -= gfull
    return g

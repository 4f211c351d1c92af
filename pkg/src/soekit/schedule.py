"""Linear-beta noise schedule, forward noising, clean-latent reversion, DDIM.

The per-step variances beta_t in (0,1) interpolate linearly. The cumulative
noise level is beta_bar_t = 1 - prod_{s<=t}(1 - beta_s), from which
alpha_t = sqrt(1 - beta_bar_t) and sigma_t = sqrt(beta_bar_t), so
alpha_t^2 + sigma_t^2 = 1 at every step and the noising map
z_t = alpha_t z0 + sigma_t eps inverts in closed form to
z0 = (z_t - sigma_t eps) / alpha_t.

Timesteps are 1-based: t in {1, ..., T}; t = 0 means fully denoised.
"""

from dataclasses import dataclass

import numpy as np

from soekit.tensor import ShapeError, Tensor

DEGENERATE_ALPHA = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-timestep coefficients; safe to share across threads."""

    T: int
    beta: np.ndarray       # (T,) per-step variances
    beta_bar: np.ndarray   # (T,) cumulative noise level, strictly increasing
    alpha_t: np.ndarray    # (T,) sqrt(1 - beta_bar)
    sigma_t: np.ndarray    # (T,) sqrt(beta_bar)

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range [1, {self.T}]")

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_t[t - 1])

    def sigma(self, t: int) -> float:
        self._check_t(t)
        return float(self.sigma_t[t - 1])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear schedule over T steps; derived arrays computed in float64."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    beta_bar = 1.0 - np.cumprod(1.0 - beta)
    return NoiseSchedule(
        T=T,
        beta=beta,
        beta_bar=beta_bar,
        alpha_t=np.sqrt(1.0 - beta_bar),
        sigma_t=np.sqrt(beta_bar),
    )


def add_noise(z0: Tensor, eps: Tensor, t: int, s: NoiseSchedule) -> Tensor:
    """Forward noising: alpha_t z0 + sigma_t eps."""
    if z0.shape != eps.shape:
        raise ShapeError("add_noise", f"z0 {z0.shape} vs eps {eps.shape}")
    s._check_t(t)
    return z0 * s.alpha(t) + eps * s.sigma(t)


def predict_z0(z_t: Tensor, eps_pred: Tensor, t: int, s: NoiseSchedule) -> Tensor:
    """Revert a noise prediction to the clean latent: (z_t - sigma_t eps) / alpha_t."""
    if z_t.shape != eps_pred.shape:
        raise ShapeError("predict_z0", f"z_t {z_t.shape} vs eps_pred {eps_pred.shape}")
    s._check_t(t)
    a = s.alpha(t)
    if a < DEGENERATE_ALPHA:
        raise ValueError(f"predict_z0: alpha_t={a:.3e} at t={t} is degenerate (< {DEGENERATE_ALPHA})")
    return (z_t - eps_pred * s.sigma(t)) * (1.0 / a)


def ddim_step(z_t: Tensor, eps_pred: Tensor, t: int, t_prev: int, s: NoiseSchedule) -> Tensor:
    """One deterministic DDIM update from t to t_prev (t_prev = 0 denoises fully)."""
    if not 0 <= t_prev < t:
        raise ValueError(f"ddim_step: need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    z0_hat = predict_z0(z_t, eps_pred, t, s)
    if t_prev == 0:
        return z0_hat
    return z0_hat * s.alpha(t_prev) + eps_pred * s.sigma(t_prev)


def ddim_timesteps(T: int, steps: int) -> list:
    """Descending timesteps for a `steps`-step DDIM chain, ending at 0.

    Evenly spaced in t, always starting at T. Returns pairs are implied:
    consecutive entries (t, t_prev) drive ddim_step.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    steps = min(steps, T)
    ts = np.unique(np.linspace(0, T, steps + 1).round().astype(int))
    return list(ts[::-1])

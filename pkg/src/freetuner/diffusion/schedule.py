"""Noise schedule and the closed-form DDIM identities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateTimestepError, InvalidArgument
from ..numerics import Tensor, ops
from ..numerics.tensor import as_tensor

ALPHA_FLOOR = 1e-12
BETA_CAP = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """``alpha_bar[t]`` for t = 0..T with ``alpha_bar[0] == 1``; ``beta[0]`` is unused (0)."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def coeffs(self, t: int):
        if not 0 <= t <= self.T:
            raise InvalidArgument(f"timestep {t} outside [0, {self.T}]")
        a = float(self.alpha_bar[t])
        return np.sqrt(a), np.sqrt(1.0 - a)


def make_schedule(T: int, beta_min: float | None = None, beta_max: float | None = None) -> NoiseSchedule:
    """Linear betas rescaled to ``T`` steps (1e-4..0.02 at T=1000).

    Betas are capped at 0.999 so that very short schedules stay valid.
    """
    if T < 2:
        raise InvalidArgument("T must be at least 2")
    scale = 1000.0 / T
    beta_min = 1e-4 * scale if beta_min is None else beta_min
    beta_max = 0.02 * scale if beta_max is None else beta_max
    betas = np.minimum(np.linspace(beta_min, beta_max, T), BETA_CAP)
    beta = np.concatenate([[0.0], betas])
    alpha_bar = np.cumprod(1.0 - beta)
    alpha_bar[0] = 1.0
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")


def add_noise(z, t: int, eps, schedule: NoiseSchedule) -> Tensor:
    """z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps."""
    z, eps = as_tensor(z), as_tensor(eps)
    _same_shape(z, eps)
    a, b = schedule.coeffs(t)
    return ops.add(ops.mul(z, a), ops.mul(eps, b))


def predict_x0(z_t, t: int, eps_hat, schedule: NoiseSchedule) -> Tensor:
    """One-shot clean-latent estimate (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)."""
    z_t, eps_hat = as_tensor(z_t), as_tensor(eps_hat)
    _same_shape(z_t, eps_hat)
    a, b = schedule.coeffs(t)
    if a * a <= ALPHA_FLOOR:
        raise DegenerateTimestepError(f"alpha_bar[{t}] too small to invert")
    return ops.div(ops.sub(z_t, ops.mul(eps_hat, b)), a)


def ddim_step(z_t, t: int, eps_hat, schedule: NoiseSchedule) -> Tensor:
    """Deterministic (eta = 0) DDIM update from t to t - 1."""
    if t < 1:
        raise InvalidArgument("ddim_step needs t >= 1")
    x0 = predict_x0(z_t, t, eps_hat, schedule)
    a, b = schedule.coeffs(t - 1)
    return ops.add(ops.mul(x0, a), ops.mul(as_tensor(eps_hat), b))


def ddim_invert_step(z_prev, t: int, eps_hat, schedule: NoiseSchedule) -> Tensor:
    """Run the DDIM recursion forward from t - 1 to t with a fixed noise estimate."""
    if t < 1:
        raise InvalidArgument("inversion step needs t >= 1")
    x0 = predict_x0(z_prev, t - 1, eps_hat, schedule)
    a, b = schedule.coeffs(t)
    return ops.add(ops.mul(x0, a), ops.mul(as_tensor(eps_hat), b))

"""DDIM inversion and null-text optimisation.

Inversion runs the deterministic sampler forward with the conditional noise
estimate only (no guidance). Reconstruction, by contrast, samples with
classifier-free guidance, which drifts away from the inverted trajectory; the
per-timestep null embeddings are optimised to close that gap.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion.autoencoder import decode_np
from .diffusion.sampling import combine_cfg, context_of, predict_eps
from .diffusion.schedule import NoiseSchedule, ddim_invert_step, ddim_step
from .diffusion.unet import Denoiser
from .errors import InvalidArgument, OptimizationFailure
from .numerics import Tensor, enable_grad, grad, no_grad, ops

DEFAULT_INNER_STEPS = 10
DEFAULT_LR = 1e-2
DEFAULT_SCALE = 3.0
MAX_HALVINGS = 12


@dataclass
class InversionResult:
    """Inverted trajectory z*_0..z*_T and optimised null embeddings (index t = 1..T)."""

    trajectory: list
    null_embeddings: dict
    reconstruction_mse: float
    baseline_mse: float | None = None
    losses: dict = field(default_factory=dict)

    @property
    def z_T(self) -> np.ndarray:
        return self.trajectory[-1]

    @property
    def T(self) -> int:
        return len(self.trajectory) - 1

    def to_tensors(self) -> dict:
        out = {f"traj/t{t}": z for t, z in enumerate(self.trajectory)}
        out.update({f"null/t{t}": e for t, e in self.null_embeddings.items()})
        out["meta/reconstruction_mse"] = np.array([self.reconstruction_mse])
        if self.baseline_mse is not None:
            out["meta/baseline_mse"] = np.array([self.baseline_mse])
        return out

    @classmethod
    def from_tensors(cls, tensors: dict) -> "InversionResult":
        traj = {int(k[6:]): v for k, v in tensors.items() if k.startswith("traj/t")}
        nulls = {int(k[6:]): v for k, v in tensors.items() if k.startswith("null/t")}
        base = tensors.get("meta/baseline_mse")
        return cls([traj[t] for t in sorted(traj)], dict(sorted(nulls.items())),
                   float(tensors["meta/reconstruction_mse"][0]),
                   None if base is None else float(base[0]))


def ddim_invert(model: Denoiser, z0, prompt, schedule: NoiseSchedule) -> list:
    """Forward DDIM recursion z*_0 -> z*_T using eps_theta(z*_{t-1}, t, prompt)."""
    with no_grad():
        ctx = context_of(model, prompt)
        z = Tensor(np.array(z0.data if isinstance(z0, Tensor) else z0, dtype=np.float64))
        traj = [z.data]
        for t in range(1, schedule.T + 1):
            eps, _ = predict_eps(model, z, t, ctx)
            z = ddim_invert_step(z, t, eps, schedule)
            traj.append(z.data)
    return traj


def reconstruct(model: Denoiser, z_T, prompt, schedule: NoiseSchedule, s: float, null_embeddings) -> np.ndarray:
    """CFG sampling from ``z_T`` with a per-timestep null embedding (dict t -> (L, d))."""
    with no_grad():
        ctx = context_of(model, prompt)
        z = Tensor(z_T)
        for t in range(schedule.T, 0, -1):
            cond, _ = predict_eps(model, z, t, ctx)
            uncond, _ = predict_eps(model, z, t, Tensor(null_embeddings[t]))
            z = ddim_step(z, t, combine_cfg(cond, uncond, s), schedule)
    return z.data


def null_text_optimize(model: Denoiser, trajectory, prompt, schedule: NoiseSchedule,
                       s: float = DEFAULT_SCALE, inner_steps: int = DEFAULT_INNER_STEPS,
                       lr: float = DEFAULT_LR, init_null=None, tol: float = 0.0):
    """Optimise one null embedding per timestep so CFG sampling retraces ``trajectory``.

    For t = T..1 the objective is the squared error between the guided DDIM
    step from the current latent and z*_{t-1}; each t starts from the previous
    optimum. Plain gradient descent with backtracking: a step that raises the
    objective is retried at half the learning rate, so the per-t loss sequence
    never increases. Returns (null_embeddings, losses) with losses[t] the
    accepted objective values (initial value first).
    """
    if inner_steps < 0:
        raise InvalidArgument("inner_steps must be non-negative")
    if len(trajectory) != schedule.T + 1:
        raise InvalidArgument("trajectory length must be T + 1")
    ctx = context_of(model, prompt)
    null = np.array(context_of(model, "" if init_null is None else init_null).data)
    nulls, losses = {}, {}
    z = Tensor(trajectory[-1])
    for t in range(schedule.T, 0, -1):
        target = trajectory[t - 1]
        with no_grad():
            cond, _ = predict_eps(model, z, t, ctx)

        def objective(e: np.ndarray, taped: bool):
            emb = Tensor(e, requires_grad=taped)
            with enable_grad() if taped else no_grad():
                uncond, _ = predict_eps(model, z, t, emb)
                z_prev = ddim_step(z, t, combine_cfg(cond, uncond, s), schedule)
                loss = ops.sum(ops.square(ops.sub(z_prev, target)))
            val = loss.item()
            if not np.isfinite(val):
                raise OptimizationFailure(t)
            return emb, loss, val

        hist = []
        if inner_steps > 0 and s != 0:
            emb, loss, val = objective(null, True)
            hist.append(val)
            step = lr
            for _ in range(inner_steps):
                if val <= tol:
                    break
                (g,) = grad(loss, [emb])
                accepted = False
                for _ in range(MAX_HALVINGS):
                    cand = null - step * g
                    c_emb, c_loss, c_val = objective(cand, True)
                    if c_val <= val:
                        null, emb, loss, val = cand, c_emb, c_loss, c_val
                        accepted = True
                        break
                    step *= 0.5
                if not accepted:
                    break
                hist.append(val)
        nulls[t] = null.copy()
        losses[t] = hist
        with no_grad():
            uncond, _ = predict_eps(model, z, t, Tensor(null))
            z = ddim_step(z, t, combine_cfg(cond, uncond, s), schedule)
    return nulls, losses


def invert(model: Denoiser, image, prompt, schedule: NoiseSchedule, s: float = DEFAULT_SCALE,
           inner_steps: int = DEFAULT_INNER_STEPS, lr: float = DEFAULT_LR,
           with_baseline: bool = False) -> InversionResult:
    """Full inversion of a (3, H, W) image: DDIM trajectory, null embeddings, reconstruction MSE."""
    from .diffusion.autoencoder import encode_np

    image = np.asarray(image, dtype=np.float64)
    traj = ddim_invert(model, encode_np(image), prompt, schedule)
    nulls, losses = null_text_optimize(model, traj, prompt, schedule, s, inner_steps, lr)
    rec = reconstruct(model, traj[-1], prompt, schedule, s, nulls)
    mse = float(np.mean((decode_np(rec) - image) ** 2))
    base = None
    if with_baseline:
        plain = np.array(context_of(model, "").data)
        rec0 = reconstruct(model, traj[-1], prompt, schedule, s, {t: plain for t in nulls})
        base = float(np.mean((decode_np(rec0) - image) ** 2))
    return InversionResult(traj, nulls, mse, base, losses)

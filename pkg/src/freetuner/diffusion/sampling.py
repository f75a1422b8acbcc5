"""Single-sample noise prediction, classifier-free guidance and the DDIM sampler."""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from ..numerics import Tensor, no_grad, ops
from ..numerics.tensor import as_tensor
from .schedule import NoiseSchedule, ddim_step
from .text import PromptEmbedding, tokenize
from .unet import AttentionRecord, Denoiser


def context_of(model: Denoiser, prompt) -> Tensor:
    """Prompt string / PromptEmbedding / raw (L, d) embedding -> context tensor."""
    if isinstance(prompt, Tensor):
        return prompt
    if isinstance(prompt, np.ndarray):
        return Tensor(prompt)
    if isinstance(prompt, str):
        prompt = tokenize(prompt)
    if isinstance(prompt, PromptEmbedding):
        return model.embed(prompt)
    raise InvalidArgument(f"cannot build a context from {type(prompt).__name__}")


def predict_eps(model: Denoiser, z_t, t: int, prompt, record: bool = False, hook=None):
    """eps_theta(z_t, t, prompt) for one (12, 16, 16) latent.

    Returns (eps, records); records are per-layer maps of shape (h*w, K),
    ordered by layer id, or None when ``record`` is false.
    """
    if not 0 <= t <= model.T:
        raise InvalidArgument(f"timestep {t} outside [0, {model.T}]")
    z_t = as_tensor(z_t)
    ctx = context_of(model, prompt)
    eps, recs = model.forward(ops.reshape(z_t, (1,) + z_t.shape), t, ctx, hook=hook, record=record)
    eps = ops.reshape(eps, z_t.shape)
    if recs is not None:
        recs = [AttentionRecord(r.layer_id, r.kind, r.resolution, ops.reshape(r.map, r.map.shape[1:]))
                for r in recs]
    return eps, recs


def combine_cfg(eps_cond, eps_uncond, s: float):
    """(1 + s) cond - s uncond, evaluated as cond + s (cond - uncond).

    The rearranged form reproduces ``eps_cond`` exactly when s = 0 or when both
    branches agree.
    """
    return ops.add(eps_cond, ops.mul(ops.sub(eps_cond, eps_uncond), s))


def cfg_eps(model: Denoiser, z_t, t: int, prompt, null_embedding, s: float):
    if s < 0:
        raise InvalidArgument("guidance scale must be non-negative")
    cond, _ = predict_eps(model, z_t, t, prompt)
    uncond, _ = predict_eps(model, z_t, t, null_embedding)
    return combine_cfg(cond, uncond, s)


def sample(model: Denoiser, schedule: NoiseSchedule, prompt, z_T, s: float = 3.0,
           null_embedding=None, callback=None) -> Tensor:
    """Plain CFG + DDIM sampler from ``z_T`` over t = T..1."""
    null_embedding = "" if null_embedding is None else null_embedding
    with no_grad():
        ctx = context_of(model, prompt)
        null = context_of(model, null_embedding)
        z = as_tensor(z_T)
        for t in range(schedule.T, 0, -1):
            eps = cfg_eps(model, z, t, ctx, null, s)
            z = ddim_step(z, t, eps, schedule)
            if callback is not None:
                callback(t, z, eps)
    return z

"""Denoising score-matching training for the toy denoiser.

Optimiser: Adam (beta1 0.9, beta2 0.999) with global-norm gradient clipping at
1.0. Learning rate: linear warm-up over the first ``warmup`` steps to
``lr``, then cosine decay to ``0.05 * lr`` at the final step.

With the v head the per-sample error is measured on the network output,
||v - v_theta||^2 = ||eps - eps_theta||^2 / ab. Both have the same minimiser at
every t; the reweighting keeps the noisiest steps, where ab is tiny and the
plain noise error carries no signal, in the objective.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InvalidArgument, TrainingDivergedError
from ..numerics import Rng, Tensor, grad, ops
from .data import ToyDataset
from .autoencoder import encode_np
from .schedule import make_schedule
from .text import tokenize
from .unet import DEFAULT_ARCH, Denoiser

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 4000
    batch: int = 16
    lr: float = 2e-3
    warmup: int = 100
    p_uncond: float = 0.15
    seed: int = 0
    init_seed: int = 0
    data_seed: int = 1000
    divergence_factor: float = 10.0
    divergence_patience: int = 100


@dataclass
class TrainResult:
    model: Denoiser
    losses: list = field(default_factory=list)


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * min(1.0, frac))))


def smoothed(losses, window: int = 50) -> np.ndarray:
    x = np.asarray(losses, dtype=np.float64)
    if len(x) == 0:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    w = np.minimum(np.arange(1, len(x) + 1), window)
    return (c[1:] - c[np.arange(1, len(x) + 1) - w]) / w


def train_toy(dataset: ToyDataset | None = None, steps: int | None = None, rng: Rng | None = None,
              cfg: TrainConfig | None = None, arch=None, progress=None) -> TrainResult:
    """Minimise E||eps - eps_theta(z_t; t, y)||^2 over the toy dataset (v-weighted with the v head)."""
    cfg = cfg or TrainConfig()
    if steps is not None:
        cfg = dataclasses.replace(cfg, steps=steps)
    if cfg.steps < 1:
        raise InvalidArgument("steps must be >= 1")
    dataset = dataset or ToyDataset(cfg.data_seed)
    rng = rng or Rng(cfg.seed)
    arch = dict(DEFAULT_ARCH if arch is None else arch)
    model = Denoiser.create(cfg.init_seed, arch)
    schedule = make_schedule(arch["T"])
    null_ids = tokenize("").ids
    names = list(model.params)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2 = 0.9, 0.999
    losses = []
    first = None
    bad = 0
    cursor = 0
    for step in range(cfg.steps):
        batch = dataset.batch(cursor, cfg.batch)
        cursor += cfg.batch
        z0 = np.stack([encode_np(s.image) for s in batch])
        t = rng.integers(1, arch["T"] + 1, (cfg.batch,))
        eps = rng.normal(z0.shape)
        drop = rng.uniform((cfg.batch,)) < cfg.p_uncond
        ids = np.stack([null_ids if d else tokenize(s.prompt).ids for s, d in zip(batch, drop)])
        ab = schedule.alpha_bar[t][:, None, None, None]
        zt = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps

        P = model.tensors(trainable=True)
        ctx = model.embed_ids(ids, P)
        pred, _ = model.forward(Tensor(zt), t, ctx, P=P)
        err = ops.sub(pred, Tensor(eps))
        if arch.get("v_head", 0):
            err = ops.div(err, Tensor(np.sqrt(ab)))
        loss = ops.mean(ops.square(err))
        grads = grad(loss, [P[k] for k in names])
        lv = loss.item()
        if not np.isfinite(lv):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        losses.append(lv)
        if first is None:
            first = lv
        bad = bad + 1 if lv > cfg.divergence_factor * first else 0
        if bad >= cfg.divergence_patience:
            raise TrainingDivergedError(
                f"loss above {cfg.divergence_factor}x initial for {bad} steps (step {step})")

        gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        clip = min(1.0, 1.0 / (gnorm + 1e-12))
        lr = lr_at(step, cfg)
        k = step + 1
        for name, g in zip(names, grads):
            g = g * clip
            m[name] = b1 * m[name] + (1 - b1) * g
            v2[name] = b2 * v2[name] + (1 - b2) * g * g
            mh = m[name] / (1 - b1 ** k)
            vh = v2[name] / (1 - b2 ** k)
            model.params[name] = model.params[name] - lr * mh / (np.sqrt(vh) + 1e-8)
        if progress is not None:
            progress(step, lv)
        if step % 100 == 0:
            log.info("step %d loss %.4f lr %.2e", step, lv, lr)
    model.refresh()
    return TrainResult(model, losses)


def write_loss_csv(path, losses) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])

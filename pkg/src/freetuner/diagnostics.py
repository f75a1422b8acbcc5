"""Measurements used by the diagnostics command and the experiments."""
from __future__ import annotations

import numpy as np

from .control import resize_mask
from .guidance import SPATIAL_LAYERS
from .numerics import Tensor, ops, pca_components


def lowfreq_fraction(img, cutoff: float = 0.25) -> float:
    """Share of (mean-removed) spectral energy at radial frequency below ``cutoff`` x Nyquist.

    Frequencies are in cycles/pixel, Nyquist = 0.5; channels are summed.
    """
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    a = a - a.mean(axis=(-2, -1), keepdims=True)
    H, W = a.shape[-2:]
    power = (np.abs(np.fft.fft2(a)) ** 2).sum(axis=0)
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.fftfreq(W)[None, :]
    radius = np.sqrt(fy * fy + fx * fx)
    total = power.sum()
    if total <= 0:
        return 1.0
    return float(power[radius < cutoff * 0.5].sum() / total)


def average_ca(records_per_step, positions, size=(16, 16), layers=SPATIAL_LAYERS) -> np.ndarray:
    """Mean over steps, cross-attention layers and token positions, resized to ``size``.

    ``layers`` defaults to the 16x16 cross-attention layers; None takes all.
    """
    acc, n = np.zeros(size), 0
    for records in records_per_step:
        for r in records:
            if r.kind != "cross" or (layers is not None and r.layer_id not in layers):
                continue
            h, w = r.resolution
            m = np.asarray(r.map.data if isinstance(r.map, Tensor) else r.map).reshape(h, w, -1)
            col = m[..., list(positions)].mean(axis=-1)
            if (h, w) != tuple(size):
                col = ops.bilinear_resize(Tensor(col[None]), *size).data[0]
            acc += col
            n += 1
    return acc / max(n, 1)


def in_mask_mass(ca_map, mask) -> float:
    """Fraction of a non-negative map's mass inside ``mask`` (resized to the map)."""
    ca_map = np.asarray(ca_map, dtype=np.float64)
    m = resize_mask(mask, *ca_map.shape)
    return float((ca_map * m).sum() / max(ca_map.sum(), 1e-300))


def latent_pca_images(latents, k: int = 3) -> list:
    """Project every latent's pixels (rows of C values) onto k shared principal axes.

    The axes are fitted on the pixels of all latents together; each output is
    (k, h, w), min-max scaled to [0, 1] per component across all steps.
    """
    latents = [np.asarray(z, dtype=np.float64) for z in latents]
    C, h, w = latents[0].shape
    rows = np.concatenate([z.reshape(C, -1).T for z in latents])
    mean = rows.mean(axis=0)
    comps = pca_components(rows, k)
    proj = (rows - mean) @ comps
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    proj = (proj - lo) / np.where(hi - lo > 0, hi - lo, 1.0)
    n = h * w
    return [proj[i * n:(i + 1) * n].T.reshape(k, h, w) for i in range(len(latents))]

"""Lossless pixel <-> latent mapping.

A 2x2 space-to-depth rearrangement followed by multiplication by 2. Only a
power-of-two scale is applied (no offset), so ``decode(encode(x))`` reproduces
every float64 pixel bit for bit. Latent channel ``4*c + 2*dy + dx`` at cell
``(i, j)`` holds ``2 * image[c, 2*i + dy, 2*j + dx]``.
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from ..numerics import Tensor, ops
from ..numerics.tensor import as_tensor

IMAGE_SHAPE = (3, 32, 32)
LATENT_SHAPE = (12, 16, 16)
SCALE = 2.0


def encode(image) -> Tensor:
    """(3, H, W) image in [0, 1] -> (12, H/2, W/2) latent; differentiable.

    The model is trained at 32 x 32, but any even extent is accepted so the
    gradient checks can run on small instances.
    """
    x = as_tensor(image)
    if x.ndim != 3 or x.shape[0] != 3 or x.shape[1] % 2 or x.shape[2] % 2:
        raise InvalidArgument(f"encode expects (3, H, W) with even H, W, got {x.shape}")
    _, H, W = x.shape
    y = ops.reshape(x, (3, H // 2, 2, W // 2, 2))
    y = ops.transpose(y, (0, 2, 4, 1, 3))
    return ops.mul(ops.reshape(y, (12, H // 2, W // 2)), SCALE)


def decode(latent) -> Tensor:
    """Inverse of :func:`encode`; accepts (12, h, w) latents."""
    z = as_tensor(latent)
    if z.ndim != 3 or z.shape[0] != 12:
        raise InvalidArgument(f"decode expects (12, h, w), got {z.shape}")
    _, h, w = z.shape
    y = ops.reshape(ops.mul(z, 1.0 / SCALE), (3, 2, 2, h, w))
    y = ops.transpose(y, (0, 3, 1, 4, 2))
    return ops.reshape(y, (3, 2 * h, 2 * w))


def encode_np(image: np.ndarray) -> np.ndarray:
    return encode(Tensor(image)).data


def decode_np(latent: np.ndarray) -> np.ndarray:
    return decode(Tensor(latent)).data

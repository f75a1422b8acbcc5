"""Frozen random-weight convolutional encoder used for style statistics.

Four stages of 3x3 conv + ReLU with widths (16, 32, 64, 128); stages 2-4 are
preceded by 2x2 average pooling, so a 32x32 input gives maps at 32, 16, 8, 4.

Weight recipe (seeded, no training): each kernel is reshaped to
(C_out, C_in*9); a Gaussian matrix is orthonormalised along its longer side via
QR (sign-corrected with diag(R)) and scaled by sqrt(2), the ReLU gain. Biases
are N(0, 0.05^2). The input image is standardised as (img - 0.5) / 0.25.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .numerics import Rng, Tensor, ops
from .numerics.tensor import as_tensor

WIDTHS = (16, 32, 64, 128)
GAIN = np.sqrt(2.0)
BIAS_STD = 0.05
INPUT_MEAN = 0.5
INPUT_STD = 0.25


def _orthonormal(rng: Rng, rows: int, cols: int) -> np.ndarray:
    a = rng.normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


@dataclass(frozen=True)
class PerceptualEncoder:
    weights: tuple  # per stage (C_out, C_in, 3, 3)
    biases: tuple
    seed: int

    @property
    def widths(self) -> tuple:
        return tuple(w.shape[0] for w in self.weights)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()

    def features(self, img) -> list:
        """List of 4 stage activations for a (3, H, W) image (H, W divisible by 8)."""
        x = as_tensor(img)
        if x.ndim != 3 or x.shape[0] != 3:
            raise InvalidArgument(f"expected a (3, H, W) image, got {x.shape}")
        if x.shape[1] % 8 or x.shape[2] % 8:
            raise InvalidArgument(f"image extent {x.shape[1:]} not divisible by 8")
        h = ops.mul(ops.sub(x, INPUT_MEAN), 1.0 / INPUT_STD)
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i:
                h = ops.avg_pool2(h)
            h = ops.relu(ops.conv2d(h, Tensor(w), Tensor(b)))
            out.append(h)
        return out

    def to_tensors(self) -> dict:
        out = {"ext/seed": np.array([float(self.seed)])}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"ext/w{i}"] = w
            out[f"ext/b{i}"] = b
        return out

    @classmethod
    def from_tensors(cls, tensors: dict) -> "PerceptualEncoder":
        n = sum(1 for k in tensors if k.startswith("ext/w"))
        ws = tuple(_readonly(tensors[f"ext/w{i}"]) for i in range(n))
        bs = tuple(_readonly(tensors[f"ext/b{i}"]) for i in range(n))
        return cls(ws, bs, int(tensors["ext/seed"][0]))


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def build_extractor(seed: int = 0, widths=WIDTHS) -> PerceptualEncoder:
    rng = Rng(seed)
    ws, bs = [], []
    c_in = 3
    for c_out in widths:
        w = GAIN * _orthonormal(rng, c_out, c_in * 9)
        ws.append(_readonly(w.reshape(c_out, c_in, 3, 3)))
        bs.append(_readonly(BIAS_STD * rng.normal((c_out,))))
        c_in = c_out
    return PerceptualEncoder(tuple(ws), tuple(bs), int(seed))


def style_distance(img, style_img, extractor: PerceptualEncoder, weights=None) -> float:
    """Sum over stages of ||mu - mu_s|| + ||sigma - sigma_s|| (plain floats, no tape)."""
    from .guidance import style_energy
    from .numerics import no_grad

    with no_grad():
        return style_energy(img, style_img, extractor, weights).item()

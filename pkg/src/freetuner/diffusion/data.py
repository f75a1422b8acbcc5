"""Procedural training images: one coloured shape on a (possibly textured) background."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import Rng
from .text import COLORS, SHAPES, TEXTURES

SIZE = 32
SUPERSAMPLE = 4

COLOR_RGB = {
    "red": (0.90, 0.15, 0.12),
    "green": (0.15, 0.72, 0.20),
    "blue": (0.15, 0.28, 0.90),
    "yellow": (0.95, 0.85, 0.10),
}


@dataclass(frozen=True)
class ToySample:
    image: np.ndarray  # (3, 32, 32) in [0, 1]
    prompt: str
    mask: np.ndarray  # (32, 32) binary subject region
    color: str
    shape: str
    texture: str
    box: tuple  # (top, left, bottom, right), pixel bounds of the mask, exclusive ends


def _grid():
    s = (np.arange(SIZE * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    return np.meshgrid(s, s, indexing="ij")


def shape_coverage(shape: str, cy: float, cx: float, r: float, rot: float = 0.0) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of a shape centred at (cy, cx) with radius r."""
    yy, xx = _grid()
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        inside = dy * dy + dx * dx <= r * r
    elif shape == "square":
        h = r * 0.85
        inside = (np.abs(dy) <= h) & (np.abs(dx) <= h)
    elif shape == "triangle":
        # upright isosceles: apex at top
        top, base = cy - r, cy + 0.8 * r
        frac = np.clip((yy - top) / (base - top), 0.0, 1.0)
        inside = (yy >= top) & (yy <= base) & (np.abs(dx) <= frac * r)
    elif shape == "star":
        ang = np.arctan2(dy, dx) + rot
        rad = np.sqrt(dy * dy + dx * dx)
        k = (np.cos(5 * ang) + 1.0) / 2.0
        inside = rad <= r * (0.5 + 0.5 * k)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    cov = inside.astype(np.float64).reshape(SIZE, SUPERSAMPLE, SIZE, SUPERSAMPLE)
    return cov.mean(axis=(1, 3))


def texture_pattern(texture: str, rng: Rng) -> np.ndarray:
    """(32, 32) pattern in [0, 1]; 0 everywhere for the plain texture."""
    yy, xx = np.meshgrid(np.arange(SIZE), np.arange(SIZE), indexing="ij")
    if texture == "plain":
        return np.zeros((SIZE, SIZE))
    if texture == "stripes":
        period = int(rng.integers(4, 9))
        orient = int(rng.integers(0, 3))
        coord = (yy, xx, yy + xx)[orient]
        return ((coord % period) < period // 2).astype(np.float64)
    if texture == "checker":
        cell = int(rng.integers(3, 6))
        return (((yy // cell) + (xx // cell)) % 2).astype(np.float64)
    if texture == "dots":
        sp = int(rng.integers(5, 8))
        oy, ox = rng.integers(0, sp, (2,))
        dy = (yy + oy) % sp - sp / 2 + 0.5
        dx = (xx + ox) % sp - sp / 2 + 0.5
        return (dy * dy + dx * dx <= 2.5).astype(np.float64)
    raise ValueError(f"unknown texture {texture!r}")


def background(texture: str, rng: Rng) -> np.ndarray:
    level = 0.35 + 0.4 * rng.uniform()
    tint = (rng.uniform((3,)) - 0.5) * 0.16
    base = np.clip(level + tint, 0.0, 1.0)[:, None, None] * np.ones((3, SIZE, SIZE))
    pat = texture_pattern(texture, rng)[None]
    if level > 0.55:
        return base * (1.0 - 0.45 * pat)  # dark pattern on light ground
    return base + (0.95 - base) * 0.5 * pat  # light pattern on dark ground


def _bbox(mask: np.ndarray) -> tuple:
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def render(color: str, shape: str, texture: str, cy: float, cx: float, r: float,
           rng: Rng, rot: float = 0.0) -> tuple:
    bg = background(texture, rng)
    cov = shape_coverage(shape, cy, cx, r, rot)
    rgb = np.clip(np.asarray(COLOR_RGB[color]) + (rng.uniform((3,)) - 0.5) * 0.1, 0.0, 1.0)
    img = bg * (1.0 - cov[None]) + rgb[:, None, None] * cov[None]
    return np.clip(img, 0.0, 1.0), (cov >= 0.5).astype(np.float64)


def sample(seed: int, texture_prob: float = 0.6) -> ToySample:
    """Deterministic sample for ``seed``.

    The caption is "a photo of a <color> <shape>", followed by
    "with <texture> background" with probability ``texture_prob``; captions
    without that suffix always show a plain background.
    """
    rng = Rng(seed)
    color = COLORS[int(rng.integers(0, 4))]
    shape = SHAPES[int(rng.integers(0, 4))]
    with_texture = rng.uniform() < texture_prob
    texture = TEXTURES[int(rng.integers(0, 4))] if with_texture else "plain"
    r = 5.0 + 4.0 * rng.uniform()
    cy, cx = 7.0 + 18.0 * rng.uniform((2,))
    rot = float(rng.uniform() * 2 * np.pi)
    img, mask = render(color, shape, texture, cy, cx, r, rng, rot)
    prompt = f"a photo of a {color} {shape}"
    if with_texture:
        prompt += f" with {texture} background"
    return ToySample(img, prompt, mask, color, shape, texture, _bbox(mask))


class ToyDataset:
    """Seed-indexed view over :func:`sample`; sample ``i`` uses seed ``base_seed + i``."""

    def __init__(self, base_seed: int = 0, texture_prob: float = 0.6):
        self.base_seed = int(base_seed)
        self.texture_prob = texture_prob

    def __getitem__(self, i: int) -> ToySample:
        return sample(self.base_seed + int(i), self.texture_prob)

    def batch(self, start: int, n: int) -> list:
        return [self[start + i] for i in range(n)]


def style_image(texture: str, seed: int, palette=None) -> np.ndarray:
    """Full-frame texture image used as a style reference."""
    rng = Rng(seed)
    pat = texture_pattern(texture, rng)
    if palette is None:
        a = rng.uniform((3,))
        b = rng.uniform((3,))
    else:
        a, b = (np.asarray(c, dtype=np.float64) for c in palette)
    return a[:, None, None] * (1.0 - pat[None]) + b[:, None, None] * pat[None]

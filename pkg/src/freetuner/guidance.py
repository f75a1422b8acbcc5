"""Energy functions and energy-guided noise prediction.

Guided prediction adds, for every active term k, lambda_k * clip(grad_z g_k)
to the classifier-free-guided noise estimate. Because the DDIM update scales
eps by a negative coefficient, this moves the latent down the energy.

Attention-box energies act on the conditional pass's cross-attention columns
(pre-swap maps). Pixel-space energies act on decode(predict_x0(z_t, eps_cond)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .control import area_resize, resize_mask
from .diffusion.autoencoder import decode
from .diffusion.sampling import combine_cfg, predict_eps
from .diffusion.schedule import NoiseSchedule, predict_x0
from .errors import GuidanceFailure, InvalidArgument
from .numerics import Tensor, grad, no_grad, ops
from .numerics.tensor import as_tensor

DEFAULT_CLIP = 10.0
TOPK_FRACTION = 0.2
NORM_FLOOR = 1e-6
SPATIAL_LAYERS = (1, 5)  # cross-attention layers at 16x16

CONTENT_STAGE_KINDS = frozenset({"spatial", "structure"})
STYLE_STAGE_KINDS = frozenset({"style", "content"})


# -- boxes -------------------------------------------------------------------

@dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned box in image pixels; ``bottom`` and ``right`` are exclusive."""

    top: int
    left: int
    bottom: int
    right: int
    image_size: tuple = (32, 32)

    def __post_init__(self):
        H, W = self.image_size
        if not (0 <= self.top < self.bottom <= H and 0 <= self.left < self.right <= W):
            raise InvalidArgument(f"box {self.as_tuple()} empty or outside {H}x{W}")

    def as_tuple(self) -> tuple:
        return (self.top, self.left, self.bottom, self.right)

    def pixel_mask(self) -> np.ndarray:
        m = np.zeros(self.image_size)
        m[self.top:self.bottom, self.left:self.right] = 1.0
        return m

    def mask(self, h: int, w: int) -> np.ndarray:
        return resize_mask(self.pixel_mask(), h, w)

    @classmethod
    def from_mask(cls, mask) -> "BoxRegion":
        m = np.asarray(mask)
        ys, xs = np.nonzero(m)
        if ys.size == 0:
            raise InvalidArgument("cannot derive a box from an empty mask")
        return cls(int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1, m.shape)


def topk_size(mask) -> int:
    return max(1, int(round(TOPK_FRACTION * float(np.asarray(mask).sum()))))


def _grid(ca, mask):
    mask = np.asarray(mask, dtype=np.float64)
    ca = as_tensor(ca)
    if ca.data.size != mask.size:
        raise InvalidArgument(f"map of {ca.data.size} cells vs mask {mask.shape}")
    return ops.reshape(ca, mask.shape), mask


# -- box energies --------------------------------------------------------------

def inner_box_loss(ca, mask, S: int) -> Tensor:
    """1 - mean of the S largest attention values inside the mask."""
    ca, mask = _grid(ca, mask)
    return ops.sub(1.0, ops.mul(ops.topk_sum(ops.mul(ca, mask), S), 1.0 / S))


def outer_box_loss(ca, mask, S: int, verbatim: bool = False) -> Tensor:
    """Mean of the S largest attention values outside the mask.

    ``verbatim`` gives 1 minus that mean, which rewards attention outside the
    box; kept only for comparison.
    """
    ca, mask = _grid(ca, mask)
    top = ops.mul(ops.topk_sum(ops.mul(ca, 1.0 - mask), S), 1.0 / S)
    return ops.sub(1.0, top) if verbatim else top


def corner_constraint_loss(ca, mask, floor: float = NORM_FLOOR) -> Tensor:
    """L1 mismatch between the axis profiles of the normalised map and the mask.

    The map is min-max normalised (range floored at ``floor``), then each of
    map and mask is reduced by max over rows (a profile along x) and max over
    columns (along y). Loss = mean |dx| + mean |dy|.
    """
    ca, mask = _grid(ca, mask)
    lo = ops.min(ca)
    rng = ops.maximum(ops.sub(ops.max(ca), lo), floor)
    n = ops.div(ops.sub(ca, lo), rng)
    loss = None
    for axis in (0, 1):
        prof = ops.max(n, axis=axis)
        target = mask.max(axis=axis)
        term = ops.mean(ops.abs(ops.sub(prof, target)))
        loss = term if loss is None else ops.add(loss, term)
    return loss


def word_columns(record_map, positions, h: int, w: int) -> list:
    m = as_tensor(record_map)
    return [ops.reshape(ops.index(m, (slice(None), p)), (h, w)) for p in positions]


def spatial_energy(records, positions, box: BoxRegion, S: int | None = None,
                   layers=SPATIAL_LAYERS, verbatim_outer: bool = False) -> Tensor:
    """Inner + outer + corner losses, summed over token positions, averaged over layers."""
    by_id = {r.layer_id: r for r in records}
    total, count = None, 0
    for layer in layers:
        rec = by_id.get(layer)
        if rec is None or rec.kind != "cross":
            raise InvalidArgument(f"no cross-attention record for layer {layer}")
        h, w = rec.resolution
        mask = box.mask(h, w)
        k = topk_size(mask) if S is None else S
        for col in word_columns(rec.map, positions, h, w):
            e = ops.add(ops.add(inner_box_loss(col, mask, k), outer_box_loss(col, mask, k, verbatim_outer)),
                        corner_constraint_loss(col, mask))
            total = e if total is None else ops.add(total, e)
        count += 1
    if total is None:
        raise InvalidArgument("spatial energy needs at least one layer and one token")
    return ops.mul(total, 1.0 / count)


def in_box_mass(records, positions, box: BoxRegion, layers=SPATIAL_LAYERS) -> float:
    """Fraction of a word's attention mass falling inside the box (diagnostic)."""
    by_id = {r.layer_id: r for r in records}
    vals = []
    for layer in layers:
        rec = by_id[layer]
        h, w = rec.resolution
        mask = box.mask(h, w).reshape(-1)
        m = rec.map.data.reshape(h * w, -1)
        for p in positions:
            col = m[:, p]
            vals.append(float((col * mask).sum() / max(col.sum(), 1e-12)))
    return float(np.mean(vals))


# -- style / content energies ----------------------------------------------------

@dataclass(frozen=True)
class StyleTarget:
    """Per-stage (mu, sigma) of a style image plus its features, computed once."""

    image: np.ndarray
    stats: tuple
    features: tuple

    @classmethod
    def of(cls, style_img, extractor) -> "StyleTarget":
        img = np.asarray(style_img.data if isinstance(style_img, Tensor) else style_img, dtype=np.float64)
        with no_grad():
            feats = extractor.features(img)
            stats = tuple((mu.data, sd.data) for mu, sd in (ops.channel_stats(f) for f in feats))
        return cls(img, stats, tuple(f.data for f in feats))


def _target(style, extractor) -> StyleTarget:
    return style if isinstance(style, StyleTarget) else StyleTarget.of(style, extractor)


def stage_weights(region_mask, h: int, w: int) -> np.ndarray:
    return area_resize(np.asarray(region_mask, dtype=np.float64), h, w)


def style_energy(img_hat, style_img, extractor, region_mask=None, features=None) -> Tensor:
    """sum_i ||mu_i - mu_i^sty||_2 + ||sigma_i - sigma_i^sty||_2.

    ``img_hat`` is bilinearly resized to the style image's extent first. With
    ``region_mask`` (in img_hat pixels) the statistics of img_hat's features
    are weighted by the mask area-resampled to each stage.
    """
    target = _target(style_img, extractor)
    img_hat = as_tensor(img_hat)
    Hs, Ws = target.image.shape[1:]
    if features is None:
        features = extractor.features(ops.bilinear_resize(img_hat, Hs, Ws))
    total = None
    for f, (mu_s, sd_s) in zip(features, target.stats):
        if f.shape[0] != mu_s.shape[0]:
            raise InvalidArgument("channel mismatch between image and style features")
        wts = None if region_mask is None else stage_weights(region_mask, *f.shape[1:])
        mu, sd = ops.channel_stats(f, wts)
        e = ops.add(ops.norm(ops.sub(mu, mu_s)), ops.norm(ops.sub(sd, sd_s)))
        total = e if total is None else ops.add(total, e)
    return total


def content_targets(subject_img_masked, style_img, extractor, size) -> tuple:
    """AdaIN(f_i(subject), f_i(style)) per stage, with the subject resized to ``size``."""
    target = _target(style_img, extractor)
    subj = as_tensor(np.asarray(subject_img_masked, dtype=np.float64))
    with no_grad():
        subj = ops.bilinear_resize(subj, *size)
        return tuple(ops.adain(f, Tensor(fs)).data
                     for f, fs in zip(extractor.features(subj), target.features))


def content_energy(img_hat, subject_img_masked, style_img, extractor, region_mask=None,
                   targets=None, features=None) -> Tensor:
    """sum_i ||f_i(img_hat) - AdaIN(f_i(subject), f_i(style))||_2.

    ``region_mask`` (optional, img_hat pixels) restricts the residual to a
    region; used when only some subjects are styled.
    """
    img_hat = as_tensor(img_hat)
    if targets is None:
        targets = content_targets(subject_img_masked, style_img, extractor, img_hat.shape[1:])
    if features is None:
        features = extractor.features(img_hat)
    total = None
    for f, tgt in zip(features, targets):
        r = ops.sub(f, tgt)
        if region_mask is not None:
            r = ops.mul(r, stage_weights(region_mask, *f.shape[1:]))
        e = ops.norm(r)
        total = e if total is None else ops.add(total, e)
    return total


SOBEL = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
LUMA = np.array([0.299, 0.587, 0.114])


def edges(img, eps: float = 1e-6) -> Tensor:
    """Sobel gradient magnitude of the luma channel, (H, W)."""
    img = as_tensor(img)
    gray = ops.sum(ops.mul(img, LUMA.reshape(3, 1, 1)), axis=0, keepdims=True)
    k = np.stack([SOBEL, SOBEL.T])[:, None]  # (2, 1, 3, 3)
    g = ops.conv2d(gray, Tensor(k))
    return ops.sqrt(ops.add(ops.sum(ops.square(g), axis=0), eps))


def structure_energy(img_hat, target_edges) -> Tensor:
    return ops.sum(ops.square(ops.sub(edges(img_hat), np.asarray(target_edges))))


# -- guided prediction ------------------------------------------------------------

class GuidanceState:
    """Quantities an energy may use, all differentiable w.r.t. ``z``.

    ``image`` (decoded x0 estimate) and extractor features are built on first
    use and shared between terms.
    """

    def __init__(self, z: Tensor, t: int, eps_cond: Tensor, records, schedule: NoiseSchedule):
        self.z = z
        self.t = t
        self.eps_cond = eps_cond
        self.records = records
        self.schedule = schedule
        self._image = None
        self._feats = {}

    @property
    def image(self) -> Tensor:
        if self._image is None:
            self._image = decode(predict_x0(self.z, self.t, self.eps_cond, self.schedule))
        return self._image

    def features(self, extractor, size=None) -> list:
        img = self.image
        size = tuple(img.shape[1:]) if size is None else tuple(size)
        key = (id(extractor), size)
        if key not in self._feats:
            x = img if size == tuple(img.shape[1:]) else ops.bilinear_resize(img, *size)
            self._feats[key] = extractor.features(x)
        return self._feats[key]


@dataclass
class EnergyTerm:
    """kind in {spatial, structure, style, content}; ``fn(state) -> scalar Tensor``."""

    kind: str
    weight: float
    fn: Callable
    name: str = ""

    def __post_init__(self):
        if self.weight < 0 or not math.isfinite(self.weight):
            raise InvalidArgument(f"energy weight must be finite and >= 0, got {self.weight}")
        if self.kind not in CONTENT_STAGE_KINDS | STYLE_STAGE_KINDS:
            raise InvalidArgument(f"unknown energy kind {self.kind!r}")
        self.name = self.name or self.kind


def check_stage(terms, stage: str):
    allowed = {"content": CONTENT_STAGE_KINDS, "style": STYLE_STAGE_KINDS}.get(stage)
    if allowed is None:
        raise InvalidArgument(f"unknown stage {stage!r}")
    for term in terms:
        if term.kind not in allowed:
            raise InvalidArgument(f"{term.kind} energy is not allowed in the {stage} stage")


def clip_norm(g: np.ndarray, bound: float | None) -> tuple:
    n = float(np.sqrt(np.sum(g * g)))
    if bound is not None and n > bound:
        g = g * (bound / n)
    return g, n


@dataclass
class GuidedResult:
    eps: Tensor
    eps_cond: Tensor
    records: list | None
    trace: list = field(default_factory=list)  # (term, value, grad_norm)
    image: np.ndarray | None = None


def guided_eps(model, z_t, t: int, prompt, null_emb, s: float, terms=(), stage: str = "content",
               schedule: NoiseSchedule | None = None, hook=None, record: bool = False,
               clip: float | None = DEFAULT_CLIP, uncond_hook=None) -> GuidedResult:
    """CFG noise estimate plus clipped, weighted energy gradients w.r.t. z_t.

    Terms with zero weight are skipped; with no active term the computation is
    exactly the unguided one. ``hook`` intercepts the conditional pass only.
    """
    if s < 0:
        raise InvalidArgument("guidance scale must be non-negative")
    check_stage(terms, stage)
    active = [term for term in terms if term.weight > 0]
    z_data = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t, dtype=np.float64)
    need_rec = record or any(term.kind == "spatial" for term in active)

    with no_grad():
        uncond, _ = predict_eps(model, Tensor(z_data), t, null_emb, hook=uncond_hook)
    if not active:
        with no_grad():
            cond, recs = predict_eps(model, Tensor(z_data), t, prompt, record=need_rec, hook=hook)
        return GuidedResult(combine_cfg(cond, uncond, s), cond, recs)

    if schedule is None:
        raise InvalidArgument("energy guidance needs the noise schedule")
    z = Tensor(z_data, requires_grad=True)
    cond, recs = predict_eps(model, z, t, prompt, record=need_rec, hook=hook)
    state = GuidanceState(z, t, cond, recs, schedule)
    total = np.zeros_like(z_data)
    trace = []
    for term in active:
        energy = term.fn(state)
        (g,) = grad(energy, [z])
        if not np.all(np.isfinite(g)) or not np.isfinite(energy.item()):
            raise GuidanceFailure(term.kind, t)
        g, n = clip_norm(g, clip)
        total = total + term.weight * g
        trace.append((term.name, energy.item(), n))
    cond_v = Tensor(cond.data)
    eps = ops.add(combine_cfg(cond_v, uncond, s), total)
    detached_recs = None
    if recs is not None:
        from .diffusion.unet import AttentionRecord
        detached_recs = [AttentionRecord(r.layer_id, r.kind, r.resolution, Tensor(r.map.data)) for r in recs]
    img = state._image.data if state._image is not None else None
    return GuidedResult(eps, cond_v, detached_recs, trace, img)

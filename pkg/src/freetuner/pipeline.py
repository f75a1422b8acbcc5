"""Two-stage personalised generation.

Iterations 1..content_steps (noisiest first) run the content stage: attention
swaps from each subject's reconstruction branch, latent blending in the first
few iterations and box-constrained attention guidance. The remaining
iterations run the style stage: style and content-preservation energies on
the decoded x0 estimate, with no swaps.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import guidance as G
from .control import (FeatureStore, SubjectSwap, SwapHook, SwapSchedule, blend_latents,
                      record_reconstruction, resize_mask, timestep_of)
from .diffusion.autoencoder import decode_np
from .diffusion.sampling import context_of
from .diffusion.schedule import NoiseSchedule, ddim_step, make_schedule, predict_x0
from .diffusion.text import tokenize
from .diffusion.unet import Denoiser
from .errors import InvalidArgument, MissingSubjectTokenError
from .extractor import PerceptualEncoder, build_extractor
from .inversion import InversionResult, invert
from .numerics import Rng, Tensor, no_grad, ops

GRAY = 0.5


def _repo_defaults() -> dict:
    try:
        return json.loads(resources.files("freetuner").joinpath("defaults.json").read_text())
    except (FileNotFoundError, ModuleNotFoundError):
        return {}


REPO_DEFAULTS = _repo_defaults()


@dataclass
class GenerationConfig:
    T: int = 50
    tau: float = 0.5
    content_steps: int = 33
    s: float = 3.0
    lambda_l: float = float(REPO_DEFAULTS.get("lambda_l", 10.0))
    lambda_s: float = 3.0
    lambda_c: float = 2.5
    latent_swap_iters: int = 5
    seed: int = 0
    extractor_seed: int = 0
    # component switches (ablation grid)
    ca_swap: bool = True
    sa_swap: bool = True
    latent_swap: bool = True
    spatial_guidance: bool = True
    style_guidance: bool = True
    content_guidance: bool = True
    no_style: bool = False
    # layer subsets: None = all attention layers for swaps
    swap_layers: tuple | None = None
    spatial_layers: tuple = G.SPATIAL_LAYERS
    grad_clip: float = G.DEFAULT_CLIP
    verbatim_outer_box: bool = False
    invert_blend_mask: bool = False
    black_bg: bool = False
    # inversion
    inversion_inner_steps: int = 10
    inversion_lr: float = float(REPO_DEFAULTS.get("inversion_lr", 1e-2))
    # personalised branch's unconditional pass: plain null prompt, or the first
    # subject's optimised per-timestep null embeddings
    share_subject_nulls: bool = False
    # external conditions
    layout_boxes: tuple = ()  # ((word, BoxRegion), ...)
    layout_weight: float = 0.0
    structure_edges: np.ndarray | None = None
    structure_weight: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.T < 2:
            raise InvalidArgument("T must be at least 2")
        if not 0 <= self.content_steps <= self.T:
            raise InvalidArgument("content_steps must lie in [0, T]")
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidArgument("tau must lie in [0, 1]")
        for name in ("s", "lambda_l", "lambda_s", "lambda_c", "layout_weight", "structure_weight"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be non-negative")
        if self.latent_swap_iters < 0:
            raise InvalidArgument("latent_swap_iters must be non-negative")

    def replace(self, **kw) -> "GenerationConfig":
        return dataclasses.replace(self, **kw)

    @property
    def content_end(self) -> int:
        return self.T if self.no_style else self.content_steps

    def swap_schedule(self) -> SwapSchedule:
        n = self.content_end
        return SwapSchedule(
            tau=self.tau if self.ca_swap else 0.0,
            sa_steps=frozenset(range(1, n + 1)) if self.sa_swap else frozenset(),
            latent_steps=frozenset(range(1, min(self.latent_swap_iters, n) + 1)) if self.latent_swap else frozenset(),
            layers=None if self.swap_layers is None else frozenset(self.swap_layers),
            invert_blend_mask=self.invert_blend_mask,
        )

    def all_off(self) -> "GenerationConfig":
        return self.replace(ca_swap=False, sa_swap=False, latent_swap=False, spatial_guidance=False,
                            style_guidance=False, content_guidance=False)


@dataclass
class StyleSpec:
    image: np.ndarray
    scope: str = "whole"  # "whole" | "subject"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.scope not in ("whole", "subject"):
            raise InvalidArgument(f"style scope must be 'whole' or 'subject', got {self.scope!r}")
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise InvalidArgument("style image must be (3, H, W)")
        H, W = self.image.shape[1:]
        if H % 8 or W % 8:
            self.image = ops.bilinear_resize(Tensor(self.image), 8 * max(1, round(H / 8)),
                                             8 * max(1, round(W / 8))).data


@dataclass
class SubjectSpec:
    """A preprocessed subject: placed, composed image, inversion and recorded features."""

    image: np.ndarray  # composed M_sub * I_sub on the neutral background, after placement
    mask: np.ndarray
    class_name: str
    prompt: str
    box: G.BoxRegion
    inversion: InversionResult | None = None
    store: FeatureStore | None = None
    style: StyleSpec | None = None
    placed: bool = False

    @property
    def class_word(self) -> str:
        return self.class_name.split()[-1]

    @property
    def words(self) -> list:
        return self.prompt.split()

    def with_style(self, style: StyleSpec | None) -> "SubjectSpec":
        return dataclasses.replace(self, style=style)


def bounding_box(mask) -> tuple:
    ys, xs = np.nonzero(np.asarray(mask))
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def place_subject(image, mask, box: G.BoxRegion, background: float = GRAY) -> tuple:
    """Scale the masked subject's bounding rectangle into ``box``; returns (image, mask)."""
    t, l, b, r = bounding_box(mask)
    H, W = mask.shape
    crop = np.asarray(image)[:, t:b, l:r]
    crop_m = np.asarray(mask)[t:b, l:r]
    bh, bw = box.bottom - box.top, box.right - box.left
    crop = ops.bilinear_resize(Tensor(crop), bh, bw).data
    crop_m = resize_mask(crop_m, bh, bw)
    out_m = np.zeros((H, W))
    out_m[box.top:box.bottom, box.left:box.right] = crop_m
    out = np.full((3, H, W), background)
    out[:, box.top:box.bottom, box.left:box.right] = crop
    out = out * out_m + background * (1.0 - out_m)
    return out, out_m


def compose_masked(image, mask, background: float = GRAY) -> np.ndarray:
    return image * mask + background * (1.0 - mask)


def preprocess_subject(model: Denoiser, image, mask, class_name: str, placement: G.BoxRegion | None = None,
                       config: GenerationConfig | None = None, prompt: str | None = None,
                       schedule: NoiseSchedule | None = None, record: bool = True) -> SubjectSpec:
    """Compose, place, invert and record one subject.

    The subject prompt defaults to "a photo of a <class_name>".
    """
    config = config or GenerationConfig()
    image = np.asarray(image, dtype=np.float64)
    mask = (np.asarray(mask, dtype=np.float64) > 0.5).astype(np.float64)
    if image.ndim != 3 or image.shape[1:] != mask.shape:
        raise InvalidArgument(f"image {image.shape} and mask {mask.shape} disagree")
    if not mask.any():
        raise InvalidArgument("subject mask is empty")
    prompt = prompt or f"a photo of a {class_name}"
    ptok = tokenize(prompt)
    if class_name.split()[-1] not in ptok.word_index_map:
        raise MissingSubjectTokenError(class_name.split()[-1])
    bg = 0.0 if config.black_bg else GRAY
    composed = compose_masked(image, mask, bg)
    placed = False
    if placement is not None and placement.as_tuple() != bounding_box(mask):
        composed, mask = place_subject(composed, mask, placement, bg)
        placed = True
    box = placement if placement is not None else G.BoxRegion.from_mask(mask)
    schedule = schedule or make_schedule(config.T)
    inv = invert(model, composed, prompt, schedule, config.s, config.inversion_inner_steps, config.inversion_lr)
    store = None
    if record:
        store = record_reconstruction(model, inv.z_T, ptok, schedule, inv.null_embeddings, config.s)
    return SubjectSpec(composed, mask, class_name, prompt, box, inv, store, placed=placed)


# -- generation ----------------------------------------------------------------------

@dataclass
class StepTrace:
    i: int
    t: int
    stage: str
    x0: np.ndarray  # decoded x0 estimate from the conditional prediction
    energies: list = field(default_factory=list)  # (term, value, grad_norm)
    swaps: dict = field(default_factory=dict)
    latent_blend: bool = False
    ca: dict | None = None  # word -> (h, w) averaged cross-attention


@dataclass
class GenerationResult:
    image: np.ndarray  # decoded z_0, unclipped
    latent: np.ndarray
    steps: list
    z_T: np.ndarray

    @property
    def x0_trajectory(self) -> list:
        return [s.x0 for s in self.steps]

    def content_output(self, content_steps: int) -> np.ndarray:
        """x0 estimate at the last content-stage iteration."""
        return self.steps[max(content_steps, 1) - 1].x0

    def energy_rows(self) -> list:
        return [(s.i, s.t, name, v, g) for s in self.steps for name, v, g in s.energies]


def _check_subjects(subjects, comp_words):
    for sub in subjects:
        if sub.class_word not in comp_words:
            raise MissingSubjectTokenError(sub.class_word)
        if sub.store is None:
            raise InvalidArgument("subject has no recorded reconstruction features")
    for a in range(len(subjects)):
        for b in range(a + 1, len(subjects)):
            if np.any(subjects[a].mask * subjects[b].mask):
                raise InvalidArgument("subject masks overlap")


def _swap_words(subjects) -> list:
    """Each subject swaps every P_sub word when alone, only its own words when several."""
    if len(subjects) <= 1:
        return [None] * len(subjects)
    out = []
    for k, sub in enumerate(subjects):
        others = set().union(*(set(o.words) for j, o in enumerate(subjects) if j != k))
        out.append(frozenset(set(sub.words) - others))
    return out


def _composite(subjects, background: float) -> tuple:
    img = np.full_like(subjects[0].image, background)
    union = np.zeros_like(subjects[0].mask)
    for sub in subjects:
        img = img * (1 - sub.mask) + sub.image * sub.mask
        union = np.maximum(union, sub.mask)
    return img, union


def _ca_by_word(records, comp, words) -> dict:
    out = {}
    cross = [r for r in records if r.kind == "cross" and r.resolution == (16, 16)] or \
            [r for r in records if r.kind == "cross"]
    for w in words:
        pos = comp.positions(w)
        if not pos:
            continue
        maps = [r.map.data.reshape(r.resolution + (-1,))[..., pos].mean(axis=-1) for r in cross]
        out[w] = np.mean(maps, axis=0)
    return out


def style_terms(config: GenerationConfig, extractor, pairs, content_image, content_region=None) -> list:
    """Energy terms for the style stage.

    ``pairs`` is a list of (StyleTarget, region_mask | None). Content guidance
    targets AdaIN(f(content_image), f(style)) per pair, restricted to the
    region for subject-only styling.
    """
    terms = []
    for k, (target, region) in enumerate(pairs):
        if config.style_guidance and config.lambda_s > 0:
            terms.append(G.EnergyTerm(
                "style", config.lambda_s,
                lambda st, tg=target, rg=region: G.style_energy(
                    st.image, tg, extractor, rg, st.features(extractor, tg.image.shape[1:])),
                f"style{k}" if len(pairs) > 1 else "style"))
        if content_image is not None and config.content_guidance and config.lambda_c > 0:
            ctg = G.content_targets(content_image, target, extractor, content_image.shape[1:])
            terms.append(G.EnergyTerm(
                "content", config.lambda_c,
                lambda st, c=ctg, rg=region: G.content_energy(
                    st.image, None, None, extractor, rg, targets=c, features=st.features(extractor)),
                f"content{k}" if len(pairs) > 1 else "content"))
    return terms


def generate(model: Denoiser, config: GenerationConfig, subjects=(), style: StyleSpec | None = None,
             prompt: str = "a photo of a red circle", extractor: PerceptualEncoder | None = None,
             z_T=None, trace: bool = False, style_pairs=None, schedule: NoiseSchedule | None = None,
             null_embedding=None) -> GenerationResult:
    """Run both stages from a seeded Gaussian latent (or ``z_T``)."""
    subjects = list(subjects)
    schedule = schedule or make_schedule(config.T)
    T = config.T
    comp = tokenize(prompt)
    _check_subjects(subjects, comp.word_index_map)
    if z_T is None:
        z_T = Rng(config.seed).normal(model.arch.get("latent_shape", (12, 16, 16)))
    z_T = np.asarray(z_T, dtype=np.float64)
    bg = 0.0 if config.black_bg else GRAY

    swaps = [SubjectSwap(sub.store, sub.mask, sub.class_word, w) for sub, w in zip(subjects, _swap_words(subjects))]
    sched = config.swap_schedule()
    h, w = z_T.shape[1:]
    latent_masks = [resize_mask(sub.mask, h, w) for sub in subjects]

    # content-stage energies
    content = []
    if config.spatial_guidance and config.lambda_l > 0:
        for sub in subjects:
            pos = comp.positions(sub.class_word)
            content.append(G.EnergyTerm(
                "spatial", config.lambda_l,
                lambda st, p=pos, b=sub.box: G.spatial_energy(st.records, p, b, layers=config.spatial_layers,
                                                              verbatim_outer=config.verbatim_outer_box),
                f"spatial_{sub.class_word}"))
    if config.layout_weight > 0:
        for word, box in config.layout_boxes:
            pos = comp.positions(word)
            if not pos:
                raise MissingSubjectTokenError(word)
            content.append(G.EnergyTerm(
                "spatial", config.layout_weight,
                lambda st, p=pos, b=box: G.spatial_energy(st.records, p, b, layers=config.spatial_layers,
                                                          verbatim_outer=config.verbatim_outer_box),
                f"layout_{word}"))
    if config.structure_weight > 0 and config.structure_edges is not None:
        content.append(G.EnergyTerm(
            "structure", config.structure_weight,
            lambda st: G.structure_energy(st.image, config.structure_edges), "structure"))

    # style-stage energies
    styled = []
    if not config.no_style:
        extractor = extractor or build_extractor(config.extractor_seed)
        if style_pairs is not None:
            styled = style_pairs
        elif style is not None:
            region = None
            if style.scope == "subject":
                if not subjects:
                    raise InvalidArgument("subject-only styling needs at least one subject")
                region = _composite(subjects, bg)[1]
            styled = [(G.StyleTarget.of(style.image, extractor), region)]
    content_image = _composite(subjects, bg)[0] if subjects else None
    late = style_terms(config, extractor, styled, content_image) if styled else []

    if null_embedding is None and config.share_subject_nulls and subjects:
        null_embedding = subjects[0].inversion.null_embeddings
    with no_grad():
        ctx = context_of(model, comp)
        if isinstance(null_embedding, dict):
            nulls = {k: Tensor(np.asarray(v)) for k, v in null_embedding.items()}
        else:
            plain = context_of(model, "" if null_embedding is None else null_embedding)
            nulls = {k: plain for k in range(1, T + 1)}
    z = z_T
    steps = []
    for i in range(1, T + 1):
        t = timestep_of(i, T)
        in_content = i <= config.content_end
        terms = content if in_content else late
        hook = None
        if in_content and swaps:
            hk = SwapHook(swaps, comp, t, T, sched)
            hook = hk if hk.active else None
        res = G.guided_eps(model, z, t, ctx, nulls[t], config.s, terms, "content" if in_content else "style",
                           schedule, hook=hook, record=trace, clip=config.grad_clip)
        with no_grad():
            z_next = ddim_step(Tensor(z), t, res.eps, schedule)
            blended = False
            if in_content and sched.latent_active(i):
                for sw, m in zip(swaps, latent_masks):
                    z_next = blend_latents(z_next, sw.store.z[t], m, sched.invert_blend_mask)
                    blended = True
            x0 = res.image if res.image is not None else \
                decode_np(predict_x0(Tensor(z), t, res.eps_cond, schedule).data)
        steps.append(StepTrace(i, t, "content" if in_content else "style", x0, res.trace,
                               dict(hook.applied) if hook is not None else {}, blended,
                               _ca_by_word(res.records, comp, comp.words()) if trace and res.records else None))
        z = z_next.data
    return GenerationResult(decode_np(z), z, steps, z_T)


def generate_multi_style(model: Denoiser, config: GenerationConfig, subjects, prompt: str,
                         extractor: PerceptualEncoder | None = None, **kw) -> GenerationResult:
    """Each subject carrying a StyleSpec is styled inside its own mask; the background gets no style term."""
    extractor = extractor or build_extractor(config.extractor_seed)
    pairs = [(G.StyleTarget.of(sub.style.image, extractor), sub.mask) for sub in subjects if sub.style is not None]
    return generate(model, config, subjects, None, prompt, extractor, style_pairs=pairs, **kw)


@dataclass(frozen=True)
class LayoutCondition:
    boxes: tuple  # ((word, BoxRegion), ...)
    weight: float = 10.0


@dataclass(frozen=True)
class StructureCondition:
    target: np.ndarray  # (3, H, W) image or (H, W) edge map
    weight: float = 1.0


def attach_external_condition(config: GenerationConfig, condition=None) -> GenerationConfig:
    """Route a layout or structure condition into the content-stage energies."""
    if condition is None:
        return config
    if isinstance(condition, LayoutCondition):
        return config.replace(layout_boxes=tuple(config.layout_boxes) + tuple(condition.boxes),
                              layout_weight=condition.weight)
    if isinstance(condition, StructureCondition):
        tgt = np.asarray(condition.target, dtype=np.float64)
        if tgt.ndim == 3:
            with no_grad():
                tgt = G.edges(tgt).data
        return config.replace(structure_edges=tgt, structure_weight=condition.weight)
    raise InvalidArgument(f"unsupported condition type {type(condition).__name__}")


def subject_region_mse(img_a, img_b, mask) -> float:
    m = np.asarray(mask, dtype=np.float64)
    d = (np.asarray(img_a) - np.asarray(img_b)) ** 2 * m
    return float(d.sum() / (3.0 * max(m.sum(), 1.0)))

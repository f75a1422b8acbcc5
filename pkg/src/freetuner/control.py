"""Reconstruction-branch recording and attention / latent swaps.

Step bookkeeping: denoising iteration ``i`` runs timestep ``t = T - i + 1``,
so iteration 1 is the noisiest step. All swap schedules are expressed in
iterations.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .diffusion.sampling import combine_cfg, context_of, predict_eps
from .diffusion.schedule import NoiseSchedule, ddim_step
from .diffusion.text import PromptEmbedding, tokenize
from .diffusion.unet import Denoiser
from .errors import InvalidArgument, MissingSubjectTokenError, PreconditionError
from .numerics import Tensor, no_grad, ops
from .numerics.tensor import as_tensor


def iteration_of(t: int, T: int) -> int:
    return T - t + 1


def timestep_of(i: int, T: int) -> int:
    return T - i + 1


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureStore:
    """Per-timestep record of the reconstruction branch.

    ``sa[t][layer]`` (N x N) and ``ca[t][layer]`` (N x L) are the conditional
    pass maps at timestep t; ``z[t]`` is the latent z_{t-1} produced by that
    step. ``z_T`` is the branch's starting latent.
    """

    prompt: PromptEmbedding
    T: int
    z_T: np.ndarray
    sa: MappingProxyType
    ca: MappingProxyType
    z: MappingProxyType

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.z_T.tobytes())
        for t in sorted(self.z):
            h.update(self.z[t].tobytes())
            for layer in sorted(self.sa[t]):
                h.update(self.sa[t][layer].tobytes())
            for layer in sorted(self.ca[t]):
                h.update(self.ca[t][layer].tobytes())
        return h.hexdigest()

    def final_latent(self) -> np.ndarray:
        return self.z[1]

    def to_tensors(self) -> dict:
        out = {"zsub/T": self.z_T}
        for t in self.z:
            out[f"zsub/t{t}"] = self.z[t]
            for layer, m in self.sa[t].items():
                out[f"sa/t{t}/l{layer}"] = m
            for layer, m in self.ca[t].items():
                out[f"ca/t{t}/l{layer}"] = m
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, prompt) -> "FeatureStore":
        if isinstance(prompt, str):
            prompt = tokenize(prompt)
        sa, ca, z = {}, {}, {}
        for k, v in tensors.items():
            parts = k.split("/")
            if parts[0] == "zsub" and parts[1] != "T":
                z[int(parts[1][1:])] = _frozen(v)
            elif parts[0] in ("sa", "ca"):
                t, layer = int(parts[1][1:]), int(parts[2][1:])
                (sa if parts[0] == "sa" else ca).setdefault(t, {})[layer] = _frozen(v)
        return cls(prompt, max(z), _frozen(tensors["zsub/T"]),
                   MappingProxyType({t: MappingProxyType(v) for t, v in sa.items()}),
                   MappingProxyType({t: MappingProxyType(v) for t, v in ca.items()}),
                   MappingProxyType(z))


@dataclass(frozen=True)
class SwapSchedule:
    """Which iterations apply each swap.

    ``tau`` is the fraction of iterations, counted from the first, during which
    cross-attention columns are swapped. ``sa_steps`` / ``latent_steps`` are
    explicit iteration sets. ``layers`` limits the swapped attention layers
    (None = all).
    """

    tau: float = 0.5
    sa_steps: frozenset = frozenset()
    latent_steps: frozenset = frozenset()
    layers: frozenset | None = None
    invert_blend_mask: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidArgument("tau must lie in [0, 1]")

    @classmethod
    def default(cls, T: int = 50, content_steps: int = 33, tau: float = 0.5,
                latent_iters: int = 5, **kw) -> "SwapSchedule":
        content = frozenset(range(1, content_steps + 1))
        return cls(tau, content, frozenset(range(1, min(latent_iters, content_steps) + 1)), **kw)

    @classmethod
    def empty(cls) -> "SwapSchedule":
        return cls(0.0, frozenset(), frozenset())

    @classmethod
    def full(cls, T: int, **kw) -> "SwapSchedule":
        steps = frozenset(range(1, T + 1))
        return cls(1.0, steps, steps, **kw)

    def ca_active(self, i: int, T: int) -> bool:
        return i <= math.ceil(self.tau * T - 1e-12)

    def sa_active(self, i: int) -> bool:
        return i in self.sa_steps

    def latent_active(self, i: int) -> bool:
        return i in self.latent_steps

    def layer_on(self, layer: int) -> bool:
        return self.layers is None or layer in self.layers

    def validate(self, T: int, content_steps: int | None = None):
        for s in self.sa_steps | self.latent_steps:
            if not 1 <= s <= T:
                raise InvalidArgument(f"swap step {s} outside [1, {T}]")
        if content_steps is not None and any(s > content_steps for s in self.latent_steps):
            raise InvalidArgument("latent swap steps must lie inside the content stage")


# -- recording ---------------------------------------------------------------

def record_reconstruction(model: Denoiser, z_T, prompt, schedule: NoiseSchedule, null_embeddings,
                          s: float) -> FeatureStore:
    """Run the reconstruction branch from ``z_T`` and keep its attention maps and latents."""
    if z_T is None or null_embeddings is None:
        raise PreconditionError("reconstruction needs an inverted latent and null embeddings")
    if isinstance(prompt, str):
        prompt = tokenize(prompt)
    missing = [t for t in range(1, schedule.T + 1) if t not in null_embeddings]
    if missing:
        raise PreconditionError(f"null embeddings missing for timesteps {missing[:5]}")
    sa, ca, zs = {}, {}, {}
    with no_grad():
        ctx = context_of(model, prompt)
        z = Tensor(np.array(z_T, dtype=np.float64))
        for t in range(schedule.T, 0, -1):
            cond, recs = predict_eps(model, z, t, ctx, record=True)
            uncond, _ = predict_eps(model, z, t, Tensor(null_embeddings[t]))
            z = ddim_step(z, t, combine_cfg(cond, uncond, s), schedule)
            sa[t] = MappingProxyType({r.layer_id: _frozen(r.map.data) for r in recs if r.kind == "self"})
            ca[t] = MappingProxyType({r.layer_id: _frozen(r.map.data) for r in recs if r.kind == "cross"})
            zs[t] = _frozen(z.data)
    return FeatureStore(prompt, schedule.T, _frozen(z_T), MappingProxyType(sa), MappingProxyType(ca),
                        MappingProxyType(zs))


# -- swap primitives -----------------------------------------------------------

def column_map(word_map_sub: dict, word_map_comp: dict, words=None) -> list:
    """Pairs (comp_position, sub_position) aligning columns by word identity.

    The k-th occurrence of a word in the composition prompt takes the k-th
    occurrence in the subject prompt (the last one when the subject prompt has
    fewer).
    """
    pairs = []
    for w, sub_pos in word_map_sub.items():
        if words is not None and w not in words:
            continue
        for k, cp in enumerate(word_map_comp.get(w, ())):
            pairs.append((cp, sub_pos[min(k, len(sub_pos) - 1)]))
    return sorted(pairs)


def swap_cross_attention(ca_pers, ca_rec, word_map_sub: dict, word_map_comp: dict,
                         step_index: int, tau: float, T: int, required=(), words=None):
    """Replace composition-prompt columns of words found in the subject prompt.

    Active only for iterations ``step_index <= ceil(tau * T)``. Columns are
    copied verbatim (rows are not renormalised). ``required`` lists words that
    must appear in the composition prompt.
    """
    for w in required:
        if w not in word_map_comp:
            raise MissingSubjectTokenError(w)
    ca_pers = as_tensor(ca_pers)
    if step_index > math.ceil(tau * T - 1e-12):
        return ca_pers
    pairs = column_map(word_map_sub, word_map_comp, words)
    if not pairs:
        return ca_pers
    rec = np.asarray(ca_rec.data if isinstance(ca_rec, Tensor) else ca_rec)
    shape = ca_pers.shape
    keep = np.ones(shape[-1])
    placed = np.zeros(shape[-2:])
    for cp, sp in pairs:
        keep[cp] = 0.0
        placed[:, cp] = rec[..., sp].reshape(-1) if rec.ndim == 2 else rec[0, :, sp]
    return ops.add(ops.mul(ca_pers, keep), placed)


def swap_self_attention(sa_pers, sa_rec, mask_at_resolution):
    """Rows (queries) inside the mask take the reconstruction's row."""
    sa_pers = as_tensor(sa_pers)
    rec = np.asarray(sa_rec.data if isinstance(sa_rec, Tensor) else sa_rec)
    m = np.asarray(mask_at_resolution, dtype=np.float64).reshape(-1)
    N = sa_pers.shape[-2]
    if m.size != N or rec.shape[-2:] != sa_pers.shape[-2:]:
        raise InvalidArgument(f"resolution mismatch: mask {m.size}, maps {sa_pers.shape} / {rec.shape}")
    if not m.any():
        return sa_pers
    rows = m[:, None]
    return ops.add(ops.mul(sa_pers, 1.0 - rows), rec.reshape(sa_pers.shape[-2:]) * rows)


def blend_latents(z_pers, z_sub, mask_latent, invert_blend_mask: bool = False):
    """z_pers * M + z_sub * (1 - M); with ``invert_blend_mask`` the roles of M and 1 - M swap."""
    z_pers = as_tensor(z_pers)
    z_sub = np.asarray(z_sub.data if isinstance(z_sub, Tensor) else z_sub)
    m = np.asarray(mask_latent, dtype=np.float64)
    if z_sub.shape != z_pers.shape or m.shape != z_pers.shape[-2:]:
        raise InvalidArgument(f"shape mismatch: {z_pers.shape}, {z_sub.shape}, mask {m.shape}")
    if invert_blend_mask:
        m = 1.0 - m
    return ops.add(ops.mul(z_pers, m), z_sub * (1.0 - m))


def resize_mask(mask, target_h: int, target_w: int) -> np.ndarray:
    """Area-average a binary mask to (target_h, target_w) and threshold at 0.5.

    A non-empty mask never vanishes: if no cell reaches half coverage, the
    cells with the largest coverage are kept.
    """
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if target_h < 1 or target_w < 1:
        raise InvalidArgument("target extent must be positive")
    if m.ndim != 2:
        raise InvalidArgument("mask must be 2-D")
    H, W = m.shape
    if (H, W) == (target_h, target_w):
        return (m >= 0.5).astype(np.float64)
    cov = area_resize(m, target_h, target_w)
    out = (cov >= 0.5 - 1e-12).astype(np.float64)
    if not out.any() and m.any():
        out = (cov >= cov.max() - 1e-12).astype(np.float64)
    return out


def area_resize(m: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Exact area-overlap resampling of a 2-D array."""
    def weights(n_in, n_out):
        edges_in = np.arange(n_in + 1) / n_in
        edges_out = np.arange(n_out + 1) / n_out
        lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
        hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
        return np.clip(hi - lo, 0.0, None) * n_out

    H, W = m.shape
    return weights(H, target_h) @ m @ weights(W, target_w).T


# -- hooks -------------------------------------------------------------------

@dataclass
class SubjectSwap:
    """Everything the personalised branch needs from one subject."""

    store: FeatureStore
    mask: np.ndarray  # image-resolution binary mask
    class_word: str
    words: frozenset | None = None  # restrict swapped CA columns (None = every P_sub word)
    _cache: dict = field(default_factory=dict, repr=False)

    def mask_at(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._cache:
            self._cache[key] = resize_mask(self.mask, h, w)
        return self._cache[key]


class SwapHook:
    """Attention hook applying the CA / SA swaps of every subject at one timestep."""

    def __init__(self, subjects, comp_prompt: PromptEmbedding, t: int, T: int, schedule: SwapSchedule):
        self.subjects = subjects
        self.comp = comp_prompt
        self.t = t
        self.i = iteration_of(t, T)
        self.T = T
        self.schedule = schedule
        self.applied = {"ca": 0, "sa": 0}

    @property
    def active(self) -> bool:
        return bool(self.subjects) and (self.schedule.ca_active(self.i, self.T) or self.schedule.sa_active(self.i))

    def __call__(self, layer_id: int, kind: str, attn):
        if not self.schedule.layer_on(layer_id):
            return attn
        out = attn
        for sub in self.subjects:
            if kind == "cross" and self.schedule.ca_active(self.i, self.T):
                rec = sub.store.ca[self.t][layer_id]
                new = swap_cross_attention(out, rec, sub.store.prompt.word_index_map,
                                           self.comp.word_index_map, self.i, self.schedule.tau, self.T,
                                           required=(sub.class_word,), words=sub.words)
                if new is not out:
                    self.applied["ca"] += 1
                out = new
            elif kind == "self" and self.schedule.sa_active(self.i):
                N = attn.shape[-2]
                h = int(round(math.sqrt(N)))
                mask = sub.mask_at(h, N // h)
                new = swap_self_attention(out, sub.store.sa[self.t][layer_id], mask)
                if new is not out:
                    self.applied["sa"] += 1
                out = new
        return out

"""Small attention U-Net noise predictor.

Layout at the default widths (32, 64):

    conv_in 12->32 @16x16
    res0 32->32, attn block A (self layer 0, cross layer 1) @16x16
    avg-pool -> res1 32->64, attn block B (self 2, cross 3) @8x8, res2 64->64
    upsample, concat skip -> res3 96->32, attn block C (self 4, cross 5) @16x16
    norm, silu, conv_out 32->12

With ``v_head`` set, conv_out gives v and the returned noise estimate is
sqrt(ab) v + sqrt(1 - ab) z. The noise estimate then tends to z as ab -> 0, so
x0 = sqrt(ab) z - sqrt(1 - ab) v stays bounded at the noisiest steps instead of
amplifying output error by 1 / sqrt(ab).

Attention maps pass through an optional ``hook(layer_id, kind, attn)`` that may
return a replacement map; the pre-hook maps are what gets recorded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument
from ..numerics import Rng, Tensor, ops
from ..numerics.tensor import as_tensor
from . import text
from .schedule import make_schedule

DEFAULT_ARCH = {
    "latent_channels": 12,
    "widths": (32, 64),
    "d_text": 32,
    "t_dim": 64,
    "groups": 8,
    "T": 50,
    "vocab_size": len(text.VOCAB),
    "max_tokens": text.MAX_TOKENS,
    "v_head": 1,
}


@dataclass
class AttentionRecord:
    layer_id: int
    kind: str  # "self" | "cross"
    resolution: tuple
    map: Tensor  # (B, h*w, K)

    def matrix(self, b: int = 0) -> np.ndarray:
        return self.map.data[b]


@dataclass
class LayerInfo:
    layer_id: int
    kind: str
    resolution: tuple
    block: str


LAYERS = (
    LayerInfo(0, "self", (16, 16), "attnA"),
    LayerInfo(1, "cross", (16, 16), "attnA"),
    LayerInfo(2, "self", (8, 8), "attnB"),
    LayerInfo(3, "cross", (8, 8), "attnB"),
    LayerInfo(4, "self", (16, 16), "attnC"),
    LayerInfo(5, "cross", (16, 16), "attnC"),
)


def timestep_features(t, dim: int, T: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * (1000.0 / T)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _param_spec(arch) -> list:
    c0, c1 = arch["widths"]
    zc, dt, td = arch["latent_channels"], arch["d_text"], arch["t_dim"]
    spec = [
        ("tok_emb", (arch["vocab_size"], dt), "emb"),
        ("pos_emb", (arch["max_tokens"], dt), "emb"),
        ("t_w1", (td, td), "lin"), ("t_b1", (td,), "zero"),
        ("t_w2", (td, td), "lin"), ("t_b2", (td,), "zero"),
        ("conv_in_w", (c0, zc, 3, 3), "conv"), ("conv_in_b", (c0,), "zero"),
    ]

    def res(name, cin, cout):
        out = [
            (f"{name}.n1_g", (cin,), "one"), (f"{name}.n1_b", (cin,), "zero"),
            (f"{name}.c1_w", (cout, cin, 3, 3), "conv"), (f"{name}.c1_b", (cout,), "zero"),
            (f"{name}.t_w", (td, cout), "lin"), (f"{name}.t_b", (cout,), "zero"),
            (f"{name}.n2_g", (cout,), "one"), (f"{name}.n2_b", (cout,), "zero"),
            (f"{name}.c2_w", (cout, cout, 3, 3), "conv_small"), (f"{name}.c2_b", (cout,), "zero"),
        ]
        if cin != cout:
            out += [(f"{name}.skip_w", (cout, cin, 1, 1), "conv"), (f"{name}.skip_b", (cout,), "zero")]
        return out

    def attn(name, c):
        return [
            (f"{name}.ns_g", (c,), "one"), (f"{name}.ns_b", (c,), "zero"),
            (f"{name}.sq", (c, c), "lin"), (f"{name}.sk", (c, c), "lin"),
            (f"{name}.sv", (c, c), "lin"), (f"{name}.so", (c, c), "lin_small"),
            (f"{name}.nc_g", (c,), "one"), (f"{name}.nc_b", (c,), "zero"),
            (f"{name}.cq", (c, c), "lin"), (f"{name}.ck", (dt, c), "lin"),
            (f"{name}.cv", (dt, c), "lin"), (f"{name}.co", (c, c), "lin_small"),
        ]

    spec += res("res0", c0, c0) + attn("attnA", c0)
    spec += res("res1", c0, c1) + attn("attnB", c1) + res("res2", c1, c1)
    spec += res("res3", c0 + c1, c0) + attn("attnC", c0)
    spec += [("out_g", (c0,), "one"), ("out_b", (c0,), "zero"),
             ("conv_out_w", (zc, c0, 3, 3), "zero"), ("conv_out_b", (zc,), "zero")]
    return spec


def init_params(arch=None, seed: int = 0) -> dict:
    """Seeded initial weights; the parameter set is a pure function of (arch, seed)."""
    arch = dict(DEFAULT_ARCH if arch is None else arch)
    rng = Rng(seed)
    params = {}
    for name, shape, kind in _param_spec(arch):
        if kind == "zero":
            v = np.zeros(shape)
        elif kind == "one":
            v = np.ones(shape)
        elif kind == "emb":
            v = rng.normal(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            std = np.sqrt(1.0 / fan_in)
            if kind in ("conv_small", "lin_small"):
                std *= 0.1
            v = rng.normal(shape) * std
        params[name] = v
    return params


@dataclass
class Denoiser:
    params: dict
    arch: dict = field(default_factory=lambda: dict(DEFAULT_ARCH))

    def __post_init__(self):
        self._frozen = {k: Tensor(v) for k, v in self.params.items()}

    @classmethod
    def create(cls, seed: int = 0, arch=None) -> "Denoiser":
        arch = dict(DEFAULT_ARCH if arch is None else arch)
        return cls(init_params(arch, seed), arch)

    @property
    def T(self) -> int:
        return int(self.arch["T"])

    @property
    def layers(self):
        return LAYERS

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def tensors(self, trainable: bool = False) -> dict:
        if trainable:
            return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}
        return self._frozen

    def refresh(self):
        self._frozen = {k: Tensor(v) for k, v in self.params.items()}

    # -- text --------------------------------------------------------------
    def embed_ids(self, ids, P=None) -> Tensor:
        P = P or self._frozen
        ids = np.asarray(ids)
        tok = ops.index(P["tok_emb"], ids)
        L = ids.shape[-1]
        return ops.add(tok, ops.index(P["pos_emb"], slice(0, L)))

    def embed(self, prompt) -> Tensor:
        if isinstance(prompt, str):
            prompt = text.tokenize(prompt)
        return self.embed_ids(prompt.ids)

    # -- network -----------------------------------------------------------
    def forward(self, z, t, context, hook=None, record=False, P=None):
        """Batched noise prediction.

        z: (B, 12, 16, 16); t: int or (B,) ints; context: (B, L, d_text) or (L, d_text).
        Returns (eps, records) where records is a list ordered by layer id.
        """
        P = P or self._frozen
        z = as_tensor(z)
        if z.ndim != 4:
            raise InvalidArgument("forward expects batched latents (B, C, H, W)")
        B = z.shape[0]
        t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t)), (B,))
        if np.any(t_arr < 0) or np.any(t_arr > self.T):
            raise InvalidArgument(f"timestep outside [0, {self.T}]")
        ctx = as_tensor(context)
        if ctx.ndim == 2:
            ctx = ops.reshape(ctx, (1,) + ctx.shape)
        records = [] if record else None

        tf = Tensor(timestep_features(t_arr, self.arch["t_dim"], self.T))
        temb = ops.silu(ops.add(ops.matmul(tf, P["t_w1"]), P["t_b1"]))
        temb = ops.silu(ops.add(ops.matmul(temb, P["t_w2"]), P["t_b2"]))

        h = ops.conv2d(z, P["conv_in_w"], P["conv_in_b"])
        h = self._res("res0", h, temb, P)
        h = self._attn("attnA", h, ctx, (0, 1), hook, records, P)
        skip = h
        d = ops.avg_pool2(h)
        d = self._res("res1", d, temb, P)
        d = self._attn("attnB", d, ctx, (2, 3), hook, records, P)
        d = self._res("res2", d, temb, P)
        u = ops.concat([ops.upsample2(d), skip], axis=1)
        u = self._res("res3", u, temb, P)
        u = self._attn("attnC", u, ctx, (4, 5), hook, records, P)
        u = ops.silu(self._norm(u, P["out_g"], P["out_b"]))
        eps = ops.conv2d(u, P["conv_out_w"], P["conv_out_b"])
        if self.arch.get("v_head", 0):
            ab = make_schedule(self.T).alpha_bar[t_arr][:, None, None, None]
            eps = ops.add(ops.mul(eps, Tensor(np.sqrt(ab))), ops.mul(z, Tensor(np.sqrt(1.0 - ab))))
        return eps, records

    def _norm(self, x, g, b):
        B, C, H, W = x.shape
        G = self.arch["groups"]
        xg = ops.reshape(x, (B, G, (C // G) * H * W))
        mu = ops.mean(xg, axis=2, keepdims=True)
        xc = ops.sub(xg, mu)
        var = ops.mean(ops.square(xc), axis=2, keepdims=True)
        xn = ops.div(xc, ops.sqrt(ops.add(var, 1e-5)))
        xn = ops.reshape(xn, (B, C, H, W))
        return ops.add(ops.mul(xn, ops.reshape(g, (C, 1, 1))), ops.reshape(b, (C, 1, 1)))

    def _res(self, name, x, temb, P):
        C_out = P[f"{name}.c1_b"].shape[0]
        h = ops.silu(self._norm(x, P[f"{name}.n1_g"], P[f"{name}.n1_b"]))
        h = ops.conv2d(h, P[f"{name}.c1_w"], P[f"{name}.c1_b"])
        tb = ops.add(ops.matmul(temb, P[f"{name}.t_w"]), P[f"{name}.t_b"])
        h = ops.add(h, ops.reshape(tb, (tb.shape[0], C_out, 1, 1)))
        h = ops.silu(self._norm(h, P[f"{name}.n2_g"], P[f"{name}.n2_b"]))
        h = ops.conv2d(h, P[f"{name}.c2_w"], P[f"{name}.c2_b"])
        if f"{name}.skip_w" in P:
            x = ops.conv2d(x, P[f"{name}.skip_w"], P[f"{name}.skip_b"])
        return ops.add(x, h)

    def _attn(self, name, x, ctx, ids, hook, records, P):
        B, C, H, W = x.shape
        N = H * W
        scale = 1.0 / np.sqrt(C)
        sa_id, ca_id = ids

        tok = ops.swap_last(ops.reshape(self._norm(x, P[f"{name}.ns_g"], P[f"{name}.ns_b"]), (B, C, N)))
        q = ops.matmul(tok, P[f"{name}.sq"])
        k = ops.matmul(tok, P[f"{name}.sk"])
        v = ops.matmul(tok, P[f"{name}.sv"])
        sa = ops.softmax_rows(ops.mul(ops.matmul(q, ops.swap_last(k)), scale))
        if records is not None:
            records.append(AttentionRecord(sa_id, "self", (H, W), sa))
        if hook is not None:
            sa = hook(sa_id, "self", sa)
        out = ops.matmul(ops.matmul(sa, v), P[f"{name}.so"])
        x = ops.add(x, ops.reshape(ops.swap_last(out), (B, C, H, W)))

        tok = ops.swap_last(ops.reshape(self._norm(x, P[f"{name}.nc_g"], P[f"{name}.nc_b"]), (B, C, N)))
        q = ops.matmul(tok, P[f"{name}.cq"])
        k = ops.matmul(ctx, P[f"{name}.ck"])
        v = ops.matmul(ctx, P[f"{name}.cv"])
        ca = ops.softmax_rows(ops.mul(ops.matmul(q, ops.swap_last(k)), scale))
        if records is not None:
            records.append(AttentionRecord(ca_id, "cross", (H, W), ca))
        if hook is not None:
            ca = hook(ca_id, "cross", ca)
        out = ops.matmul(ops.matmul(ca, v), P[f"{name}.co"])
        return ops.add(x, ops.reshape(ops.swap_last(out), (B, C, H, W)))


def to_checkpoint(model: Denoiser) -> dict:
    out = {f"param/{k}": v for k, v in model.params.items()}
    for k, v in model.arch.items():
        out[f"arch/{k}"] = np.atleast_1d(np.asarray(v, dtype=np.float64))
    return out


def from_checkpoint(tensors: dict) -> Denoiser:
    arch = {}
    for k, v in tensors.items():
        if k.startswith("arch/"):
            key = k[5:]
            vals = tuple(int(x) for x in v.reshape(-1))
            arch[key] = vals if key == "widths" else vals[0]
    params = {k[6:]: np.array(v) for k, v in tensors.items() if k.startswith("param/")}
    return Denoiser(params, arch)

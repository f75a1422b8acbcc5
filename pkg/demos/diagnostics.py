"""
What the toy model's attention and latents show
===============================================

Two diagnostics on the shipped model, printed and written to
``demos/out/diagnostics``:

* cross-attention localisation: in-mask attention mass of each caption word,
  averaged over the inversion trajectory, against the mask's area. The 16x16
  layers (1 and 5) and the 8x8 layer (3) are reported separately.
* coarse-to-fine: share of low-frequency energy in the x0 estimate along the
  sampling trajectory, and latent PCA images every 5 steps.

Run:  python3 demos/diagnostics.py [--samples 20]
"""
import argparse
from pathlib import Path

import numpy as np

from freetuner import load_model
from freetuner.cli import image_grid
from freetuner.control import resize_mask
from freetuner.diagnostics import average_ca, in_mask_mass, latent_pca_images, lowfreq_fraction
from freetuner.diffusion.autoencoder import decode_np, encode_np
from freetuner.diffusion.data import sample as toy_sample
from freetuner.diffusion.sampling import predict_eps, sample
from freetuner.diffusion.schedule import make_schedule, predict_x0
from freetuner.diffusion.text import tokenize
from freetuner.imageio import minmax, write_ppm
from freetuner.inversion import ddim_invert
from freetuner.numerics import Rng, Tensor, no_grad

ap = argparse.ArgumentParser()
ap.add_argument("--samples", type=int, default=20)
args = ap.parse_args()

out = Path(__file__).parent / "out" / "diagnostics"
out.mkdir(parents=True, exist_ok=True)
model = load_model()
sched = make_schedule(50)

# %%
# Cross-attention localisation
# ----------------------------

ratios = {"shape@16": [], "shape@8": [], "color@16": [], "color@8": []}
with no_grad():
    for k in range(args.samples):
        s = toy_sample(200100 + k)
        tok = tokenize(s.prompt)
        traj = ddim_invert(model, encode_np(s.image), tok, sched)
        recs = [predict_eps(model, traj[t], t, tok, record=True)[1] for t in range(1, 51)]
        base = resize_mask(s.mask, 16, 16).mean()
        for word, key in ((s.shape, "shape"), (s.color, "color")):
            for layers, res in (((1, 5), "16"), ((3,), "8")):
                ca = average_ca(recs, tok.positions(word), layers=layers)
                ratios[f"{key}@{res}"].append(in_mask_mass(ca, s.mask) / base)
        if k < 4:
            ca = average_ca(recs, tok.positions(s.shape))
            write_ppm(out / f"ca_{k}_{s.shape}.ppm", np.repeat(minmax(ca)[None], 3, axis=0))
            write_ppm(out / f"image_{k}.ppm", s.image)

print("in-mask attention mass / uniform baseline (>1 means localised)")
for key, v in ratios.items():
    v = np.array(v)
    print(f"  {key:9s} mean {v.mean():.2f}  above uniform on {np.mean(v > 1):.0%} of samples")

# %%
# Coarse-to-fine
# --------------
# Early x0 estimates carry mostly low frequencies; detail arrives late.

fracs = []
with no_grad():
    for seed in range(5):
        s = toy_sample(200200 + seed)
        x0s, zs = [], []

        def keep(t, z, eps):
            zs.append(z.data)

        z_T = Rng(seed).normal((12, 16, 16))
        sample(model, sched, s.prompt, z_T, 3.0, callback=keep)
        z_prev = [z_T] + zs[:-1]
        for t, z in zip(range(50, 0, -1), z_prev):
            eps, _ = predict_eps(model, z, t, s.prompt)
            x0s.append(decode_np(predict_x0(Tensor(z), t, eps, sched).data))
        fracs.append([lowfreq_fraction(x) for x in x0s])
        if seed == 0:
            write_ppm(out / "x0_strip.ppm", image_grid([x0s[i] for i in range(4, 50, 5)], 10))
            write_ppm(out / "pca_strip.ppm", image_grid(latent_pca_images(zs)[4::5], 10))
fracs = np.mean(fracs, axis=0)
print("low-frequency fraction of x0 by step:", " ".join(f"{i + 1}:{fracs[i]:.2f}" for i in range(0, 50, 7)))
print(f"images in {out}")

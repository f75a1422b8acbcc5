"""Command-line entry point: ``freetuner {train-toy,generate,ablate,diag}``.

Every command reads an optional JSON run configuration (unknown keys are
rejected), writes into ``--out`` (created if missing) and copies the
configuration file there verbatim.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint, guidance as G
from .control import resize_mask
from .diagnostics import average_ca, in_mask_mass, latent_pca_images
from .diffusion.autoencoder import decode_np
from .diffusion.data import sample as toy_sample, style_image
from .diffusion.sampling import combine_cfg, context_of, predict_eps
from .diffusion.schedule import ddim_step, make_schedule
from .diffusion.text import tokenize
from .diffusion.train import TrainConfig, train_toy, write_loss_csv
from .diffusion.unet import LAYERS, AttentionRecord, to_checkpoint
from .errors import (DegenerateTimestepError, FreeTunerError, GuidanceFailure, InvalidArgument,
                     OptimizationFailure, TrainingDivergedError)
from .extractor import build_extractor, style_distance
from .imageio import minmax, read_image, read_mask, write_ppm
from .models import load_model
from .numerics import Rng, Tensor, no_grad
from .pipeline import (GenerationConfig, GenerationResult, LayoutCondition, StructureCondition, StyleSpec,
                       attach_external_condition, generate, generate_multi_style, preprocess_subject,
                       subject_region_mse)

log = logging.getLogger("freetuner")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
ABLATION_COMPONENTS = ("ca_swap", "sa_swap", "latent_swap", "spatial_guidance", "style_guidance",
                       "content_guidance")


class ConfigError(FreeTunerError):
    pass


# -- run configuration ----------------------------------------------------------

_GEN_FIELDS = {f.name for f in dataclasses.fields(GenerationConfig)} - {
    "layout_boxes", "layout_weight", "structure_edges", "structure_weight"}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}

SCHEMA = {
    "model": str,
    "seed": int,
    "prompt": str,
    "trace": bool,
    "subjects": list,
    "style": dict,
    "generation": dict,
    "train": dict,
    "ablate": dict,
    "diag": dict,
    "condition": dict,
}
SUBJECT_KEYS = {"image", "mask", "class_name", "prompt", "box", "style"}
STYLE_KEYS = {"image", "scope"}
ABLATE_KEYS = {"seeds", "components"}
DIAG_KEYS = {"image", "mask", "class_name", "prompt"}
CONDITION_KEYS = {"type", "boxes", "target", "weight"}


def _reject_unknown(d: dict, allowed, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def parse_config(text: str) -> dict:
    """Parse and validate a run configuration; raises ConfigError with line/column on bad JSON."""
    try:
        cfg = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    _reject_unknown(cfg, SCHEMA, "config")
    for k, typ in SCHEMA.items():
        if k in cfg and not isinstance(cfg[k], typ):
            raise ConfigError(f"config key {k!r} must be of type {typ.__name__}")
    _reject_unknown(cfg.get("generation", {}), _GEN_FIELDS, "generation")
    _reject_unknown(cfg.get("train", {}), _TRAIN_FIELDS, "train")
    _reject_unknown(cfg.get("ablate", {}), ABLATE_KEYS, "ablate")
    _reject_unknown(cfg.get("diag", {}), DIAG_KEYS, "diag")
    _reject_unknown(cfg.get("style", {}), STYLE_KEYS, "style")
    _reject_unknown(cfg.get("condition", {}), CONDITION_KEYS, "condition")
    for i, sub in enumerate(cfg.get("subjects", [])):
        _reject_unknown(sub, SUBJECT_KEYS, f"subjects[{i}]")
        if "style" in sub:
            _reject_unknown(sub["style"], STYLE_KEYS, f"subjects[{i}].style")
    return cfg


def generation_config(cfg: dict, args) -> GenerationConfig:
    kw = dict(cfg.get("generation", {}))
    for k in ("swap_layers", "spatial_layers"):
        if kw.get(k) is not None:
            kw[k] = tuple(kw[k])
    if "seed" in cfg:
        kw["seed"] = cfg["seed"]
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    for flag, field in (("no_style", "no_style"), ("verbatim_outer_box", "verbatim_outer_box"),
                        ("invert_blend_mask", "invert_blend_mask"), ("black_bg", "black_bg")):
        if getattr(args, flag, False):
            kw[field] = True
    try:
        gen = GenerationConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cond = cfg.get("condition")
    if cond:
        gen = attach_external_condition(gen, _condition(cond))
    return gen


def _condition(c: dict):
    kind = c.get("type")
    if kind == "layout":
        boxes = tuple((w, G.BoxRegion(*b)) for w, b in c.get("boxes", {}).items())
        return LayoutCondition(boxes, float(c.get("weight", 10.0)))
    if kind == "structure":
        return StructureCondition(load_image(c["target"]), float(c.get("weight", 1.0)))
    raise ConfigError(f"unsupported condition type {kind!r}")


def load_image(src: str) -> np.ndarray:
    """Image from a path, ``toy:<seed>`` (toy dataset sample) or ``toy-style:<texture>:<seed>``."""
    if src.startswith("toy:"):
        return toy_sample(int(src[4:])).image
    if src.startswith("toy-style:"):
        _, texture, seed = src.split(":")
        return style_image(texture, int(seed))
    return read_image(src)


def load_mask(src: str) -> np.ndarray:
    if src.startswith("toy:"):
        return toy_sample(int(src[4:])).mask
    return read_mask(src)


def _class_name(sub: dict) -> str:
    if "class_name" in sub:
        return sub["class_name"]
    if str(sub.get("image", "")).startswith("toy:"):
        s = toy_sample(int(sub["image"][4:]))
        return f"{s.color} {s.shape}"
    raise ConfigError("subject needs a class_name")


def build_subjects(model, cfg: dict, gen: GenerationConfig) -> list:
    subjects = []
    for sub in cfg.get("subjects", []):
        img = load_image(sub["image"])
        mask = load_mask(sub.get("mask", sub["image"]))
        box = G.BoxRegion(*sub["box"], image_size=mask.shape) if "box" in sub else None
        spec = preprocess_subject(model, img, mask, _class_name(sub), box, gen, sub.get("prompt"))
        if "style" in sub:
            spec = spec.with_style(StyleSpec(load_image(sub["style"]["image"]), "subject"))
        subjects.append(spec)
    return subjects


def default_prompt(cfg: dict) -> str:
    if "prompt" in cfg:
        return cfg["prompt"]
    subs = cfg.get("subjects", [])
    if subs:
        return "a photo of a " + _class_name(subs[0])
    return "a photo of a red circle"


def _copy_config(out: Path, args, cfg: dict):
    out.mkdir(parents=True, exist_ok=True)
    if args.config:
        (out / "config.json").write_bytes(Path(args.config).read_bytes())
    else:
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------------

def run_generate(model, cfg: dict, gen: GenerationConfig, trace: bool = False) -> tuple:
    subjects = build_subjects(model, cfg, gen)
    prompt = default_prompt(cfg)
    if any(s.style is not None for s in subjects):
        return generate_multi_style(model, gen, subjects, prompt, trace=trace), subjects
    style = None
    if "style" in cfg and not gen.no_style:
        style = StyleSpec(load_image(cfg["style"]["image"]), cfg["style"].get("scope", "whole"))
    return generate(model, gen, subjects, style, prompt, trace=trace), subjects


def write_trace(out: Path, result: GenerationResult):
    tdir = out / "trace"
    tdir.mkdir(parents=True, exist_ok=True)
    for st in result.steps:
        write_ppm(tdir / f"step_{st.i:03}_x0.ppm", st.x0)
        if st.ca:
            for word, m in st.ca.items():
                write_ppm(tdir / f"ca_{word}_{st.t}.ppm", minmax(m))
    with open(tdir / "energies.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "term", "value", "grad_norm"])
        for row in result.energy_rows():
            w.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4])])


def cmd_generate(args, cfg: dict) -> int:
    out = Path(args.out)
    _copy_config(out, args, cfg)
    gen = generation_config(cfg, args)
    model = load_model(cfg.get("model"))
    trace = bool(args.trace or cfg.get("trace", False))
    result, _ = run_generate(model, cfg, gen, trace)
    write_ppm(out / "image.ppm", result.image)
    checkpoint.save(out / "latent.ftck", {"z0": result.latent, "zT": result.z_T})
    if trace:
        write_trace(out, result)
    log.info("wrote %s", out / "image.ppm")
    return EXIT_OK


def cmd_train_toy(args, cfg: dict) -> int:
    out = Path(args.out)
    _copy_config(out, args, cfg)
    kw = dict(cfg.get("train", {}))
    if args.seed is not None:
        kw["seed"] = args.seed
    tc = TrainConfig(**kw)
    res = train_toy(cfg=tc, progress=lambda step, loss: log.info("step %d loss %.4f", step, loss)
                    if step % 100 == 0 else None)
    checkpoint.save(out / "model.ftck", to_checkpoint(res.model))
    write_loss_csv(out / "loss.csv", res.losses)
    return EXIT_OK


def _cells(components) -> list:
    return [dict(zip(components, bits)) for bits in itertools.product((False, True), repeat=len(components))]


def cmd_ablate(args, cfg: dict) -> int:
    out = Path(args.out)
    _copy_config(out, args, cfg)
    ab = cfg.get("ablate", {})
    components = tuple(ab.get("components", ABLATION_COMPONENTS))
    bad = set(components) - set(ABLATION_COMPONENTS)
    if bad:
        raise ConfigError(f"unknown ablation component(s): {', '.join(sorted(bad))}")
    base = generation_config(cfg, args)
    seeds = ab.get("seeds", [base.seed])
    model = load_model(cfg.get("model"))
    subjects = build_subjects(model, cfg, base)
    prompt = default_prompt(cfg)
    style = None
    if "style" in cfg and not base.no_style:
        style = StyleSpec(load_image(cfg["style"]["image"]), cfg["style"].get("scope", "whole"))
    extractor = build_extractor(base.extractor_seed)
    recon = [decode_np(s.store.final_latent()) for s in subjects]
    cells = _cells(components)
    jobs = [(ci, cell, seed) for ci, cell in enumerate(cells) for seed in seeds]

    def run(job):
        ci, cell, seed = job
        gen = base.replace(seed=int(seed), **cell)
        res = generate(model, gen, subjects, style, prompt, extractor)
        mse = float(np.mean([subject_region_mse(res.image, r, s.mask) for r, s in zip(recon, subjects)])) \
            if subjects else float("nan")
        dist = style_distance(res.image, style.image, extractor) if style is not None else float("nan")
        return ci, seed, res.image, mse, dist

    threads = max(1, int(os.environ.get("FREETUNER_THREADS", os.cpu_count() or 1)))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(run, jobs))

    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "seed", *components, "subject_mse", "style_distance"])
        for ci, seed, _, mse, dist in results:
            w.writerow([ci, seed, *(int(cells[ci][c]) for c in components), repr(mse), repr(dist)])
    write_ppm(out / "grid.ppm", image_grid([r[2] for r in results], len(seeds)))
    return EXIT_OK


def image_grid(images, cols: int, gap: int = 1) -> np.ndarray:
    """Tile (3, H, W) images row-major with ``cols`` per row and white gaps."""
    H, W = images[0].shape[1:]
    rows = -(-len(images) // cols)
    grid = np.ones((3, rows * (H + gap) - gap, cols * (W + gap) - gap))
    for k, img in enumerate(images):
        r, c = divmod(k, cols)
        grid[:, r * (H + gap):r * (H + gap) + H, c * (W + gap):c * (W + gap) + W] = np.clip(img, 0, 1)
    return grid


def cmd_diag(args, cfg: dict) -> int:
    """Per-word averaged cross-attention maps and per-step latent PCA images.

    With a subject image the maps come from its reconstruction branch; without,
    from a plain sample of the prompt.
    """
    out = Path(args.out)
    _copy_config(out, args, cfg)
    gen = generation_config(cfg, args)
    model = load_model(cfg.get("model"))
    schedule = make_schedule(gen.T)
    d = cfg.get("diag", {})
    mask = None
    if "image" in d:
        img = load_image(d["image"])
        mask = load_mask(d.get("mask", d["image"]))
        cls = d.get("class_name") or _class_name(d)
        sub = preprocess_subject(model, img, mask, cls, None, gen, d.get("prompt"), schedule)
        prompt, mask, subject_word = sub.store.prompt, sub.mask, sub.class_word
        steps = range(gen.T, 0, -1)
        records = [[AttentionRecord(l, "cross", LAYERS[l].resolution, m) for l, m in sub.store.ca[t].items()]
                   for t in steps]
        latents = [sub.store.z[t] for t in steps]
    else:
        prompt = tokenize(d.get("prompt", default_prompt(cfg)))
        records, latents = _plain_run(model, gen, prompt)
    ddir = out / "diag"
    ddir.mkdir(parents=True, exist_ok=True)
    rows = []
    for word in dict.fromkeys(prompt.words()):
        m = average_ca(records, prompt.positions(word))
        write_ppm(ddir / f"ca_{word}.ppm", minmax(m))
        if mask is not None:
            rows.append((word, in_mask_mass(m, mask), float(resize_mask(mask, *m.shape).mean())))
    for i, img in enumerate(latent_pca_images(latents), start=1):
        write_ppm(ddir / f"pca_step_{i:03}.ppm", img)
    if rows:
        with open(ddir / "ca_mass.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["word", "in_mask_mass", "uniform_baseline", "is_subject"])
            for word, mass, base in rows:
                w.writerow([word, repr(mass), repr(base), int(word == subject_word)])
    return EXIT_OK


def _plain_run(model, gen, prompt):
    """Plain CFG sampling keeping every step's records and latent."""
    schedule = make_schedule(gen.T)
    records, latents = [], []
    with no_grad():
        ctx = context_of(model, prompt)
        null = context_of(model, "")
        z = Tensor(Rng(gen.seed).normal((12, 16, 16)))
        for t in range(gen.T, 0, -1):
            cond, recs = predict_eps(model, z, t, ctx, record=True)
            uncond, _ = predict_eps(model, z, t, null)
            z = ddim_step(z, t, combine_cfg(cond, uncond, gen.s), schedule)
            records.append(recs)
            latents.append(z.data)
    return records, latents


# -- entry point ------------------------------------------------------------------

COMMANDS = {"train-toy": cmd_train_toy, "generate": cmd_generate, "ablate": cmd_ablate, "diag": cmd_diag}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freetuner", description="Training-free subject/style composition on a toy model.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="overrides the configuration's seed")
        sp.add_argument("--out", required=True, help="output directory (created if missing)")
        sp.add_argument("--trace", action="store_true", help="write per-step x0 images, energies and CA maps")
        sp.add_argument("--no-style", action="store_true", help="run the content stage for all steps")
        sp.add_argument("--verbatim-outer-box", action="store_true",
                        help="use 1 - top-k outside mass for the outer-box energy")
        sp.add_argument("--invert-blend-mask", action="store_true",
                        help="latent blending keeps the subject latent inside the mask")
        sp.add_argument("--black-bg", action="store_true", help="compose masked subjects on black, not gray")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = parse_config(Path(args.config).read_text()) if args.config else {}
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, InvalidArgument, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, OptimizationFailure, GuidanceFailure, DegenerateTimestepError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FreeTunerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

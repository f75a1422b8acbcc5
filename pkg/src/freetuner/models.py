"""Loading the toy denoiser shipped with the package (or any FTCK checkpoint)."""
from __future__ import annotations

import functools
from importlib import resources

from . import checkpoint
from .diffusion.unet import Denoiser, from_checkpoint

DEFAULT_CHECKPOINT = "toy.ftck"


def default_checkpoint_path():
    return resources.files("freetuner").joinpath("assets", DEFAULT_CHECKPOINT)


@functools.lru_cache(maxsize=4)
def _load_cached(path: str) -> Denoiser:
    return from_checkpoint(checkpoint.load(path))


def load_model(path=None) -> Denoiser:
    """Denoiser from ``path``, defaulting to the trained toy model in the package."""
    return _load_cached(str(path if path is not None else default_checkpoint_path()))

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from freetuner.diffusion.schedule import make_schedule
from freetuner.diffusion.unet import Denoiser
from freetuner.models import load_model


@pytest.fixture(scope="session")
def seeded_model():
    """Untrained denoiser with a non-zero output layer so gradients are informative."""
    import numpy as np

    m = Denoiser.create(seed=3)
    rng = np.random.default_rng(0)
    m.params["conv_out_w"] = rng.normal(0, 0.05, m.params["conv_out_w"].shape)
    m.refresh()
    return m


@pytest.fixture(scope="session")
def model():
    return load_model()


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(50)


@pytest.fixture(scope="session")
def seeded_subject(seeded_model, schedule):
    """Subject preprocessed on the untrained model, plain DDIM nulls (no inner steps)."""
    from freetuner.diffusion.data import sample as toy_sample
    from freetuner.pipeline import GenerationConfig, preprocess_subject

    s = toy_sample(11)
    cfg = GenerationConfig(inversion_inner_steps=0)
    return preprocess_subject(seeded_model, s.image, s.mask, f"{s.color} {s.shape}", config=cfg,
                              schedule=schedule)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])

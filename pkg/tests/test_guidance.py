import itertools

import numpy as np
import pytest

from freetuner.diffusion.autoencoder import decode
from freetuner.diffusion.data import sample as toy_sample, style_image
from freetuner.diffusion.sampling import cfg_eps, predict_eps
from freetuner.diffusion.schedule import predict_x0
from freetuner.diffusion.text import tokenize
from freetuner.diffusion.unet import AttentionRecord
from freetuner.errors import GuidanceFailure, InvalidArgument
from freetuner.extractor import build_extractor
from freetuner.guidance import (BoxRegion, EnergyTerm, clip_norm, content_energy, corner_constraint_loss, edges,
                                guided_eps, inner_box_loss, outer_box_loss, spatial_energy, structure_energy,
                                style_energy, topk_size)
from freetuner.numerics import Tensor, no_grad, ops

from helpers import analytic_grad, central_diff, rel_errors

PROMPT = "a photo of a red circle"


@pytest.fixture(scope="module")
def ext():
    return build_extractor(0)


def topS(v, S):
    return np.sort(np.ravel(v))[::-1][:S].sum()


# -- box losses ----------------------------------------------------------------------

def test_inner_box_trivial_cases():
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1
    ca = np.where(mask > 0, 1.0, 0.3)
    assert inner_box_loss(ca, mask, 4).item() == 0.0
    assert inner_box_loss(np.where(mask > 0, 0.0, 0.5), mask, 2).item() == 1.0


def test_box_losses_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        ca = rng.uniform(size=(8, 8))
        mask = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
        S = 4
        assert np.isclose(inner_box_loss(ca, mask, S).item(), 1 - topS(ca * mask, S) / S, rtol=0, atol=1e-15)
        ob = topS(ca * (1 - mask), S) / S
        assert np.isclose(outer_box_loss(ca, mask, S).item(), ob, rtol=0, atol=1e-15)
        assert np.isclose(outer_box_loss(ca, mask, S, verbatim=True).item(), 1 - ob, rtol=0, atol=1e-15)


def test_outer_box_trivial_cases():
    mask = np.zeros((4, 4))
    mask[:2] = 1
    assert outer_box_loss(mask * 0.7, mask, 3).item() == 0.0
    assert outer_box_loss(1 - mask, mask, 3).item() == 1.0


def test_box_losses_reject_large_S():
    with pytest.raises(InvalidArgument):
        inner_box_loss(np.ones((2, 2)), np.ones((2, 2)), 5)
    with pytest.raises(InvalidArgument):
        outer_box_loss(np.ones((2, 2)), np.ones((2, 2)), 5)


def test_corner_loss_examples():
    mask = np.zeros((4, 4))
    mask[:, :2] = 1
    assert corner_constraint_loss(mask, mask).item() == 0.0
    # x profile of 1 - mask: [0, 0, 1, 1] vs [1, 1, 0, 0]; y profiles both all ones
    assert corner_constraint_loss(1 - mask, mask).item() == pytest.approx(1.0, abs=1e-15)
    ca = np.random.default_rng(1).uniform(size=(4, 4))
    n = (ca - ca.min()) / (ca.max() - ca.min())
    expected = np.mean(1 - n.max(axis=0)) + np.mean(1 - n.max(axis=1))
    assert corner_constraint_loss(ca, np.ones((4, 4))).item() == pytest.approx(expected, abs=1e-14)


def test_corner_loss_constant_map_is_finite():
    v = corner_constraint_loss(np.full((4, 4), 0.2), np.eye(4))
    assert np.isfinite(v.item())
    t = Tensor(np.full((4, 4), 0.2), requires_grad=True)
    from freetuner.numerics import grad
    (g,) = grad(corner_constraint_loss(t, np.eye(4)), [t])
    assert np.all(np.isfinite(g))


@pytest.mark.parametrize("S", [1, 2])
def test_inner_box_argmin_exhaustive(S):
    cells = range(9)
    for bits in range(1, 512):
        mask = np.array([(bits >> k) & 1 for k in cells], dtype=float).reshape(3, 3)
        if mask.sum() < S:
            continue
        losses = {}
        for ones in itertools.combinations(cells, S):
            ca = np.zeros(9)
            ca[list(ones)] = 1.0  # total mass S on S cells
            losses[ones] = inner_box_loss(ca.reshape(3, 3), mask, S).item()
        best = min(losses.values())
        argmin = {k for k, v in losses.items() if v == best}
        inside = {k for k in losses if all(mask.reshape(-1)[c] for c in k)}
        assert best == 0.0 and argmin == inside


def _records_from(maps):
    return [AttentionRecord(lid, "cross", (4, 4), Tensor(m)) for lid, m in maps.items()]


def test_spatial_energy_at_optimum():
    box = BoxRegion(8, 8, 24, 24)  # centre 2x2 block on a 4x4 grid
    mask = box.mask(4, 4)
    maps = {}
    for lid in (1, 5):
        m = np.full((16, 12), 0.01)
        m[:, 5] = mask.reshape(-1)
        maps[lid] = m
    e = spatial_energy(_records_from(maps), [5], box)
    assert e.item() == pytest.approx(0.0, abs=1e-12)
    assert topk_size(mask) == 1


def test_spatial_energy_averages_layers():
    box = BoxRegion(0, 0, 16, 32)
    rng = np.random.default_rng(2)
    maps = {1: rng.uniform(size=(16, 12)), 5: rng.uniform(size=(16, 12))}
    recs = _records_from(maps)
    per = [spatial_energy(recs, [4, 5], box, layers=(lid,)).item() for lid in (1, 5)]
    assert spatial_energy(recs, [4, 5], box).item() == pytest.approx(np.mean(per), rel=1e-14)
    with pytest.raises(InvalidArgument):
        spatial_energy(recs, [4], box, layers=(3,))


def test_box_region_validation():
    with pytest.raises(InvalidArgument):
        BoxRegion(4, 4, 4, 10)
    with pytest.raises(InvalidArgument):
        BoxRegion(0, 0, 33, 10)
    m = np.zeros((32, 32))
    m[3:9, 5:20] = 1
    assert BoxRegion.from_mask(m).as_tuple() == (3, 5, 9, 20)


# -- style / content -------------------------------------------------------------------

def np_stats(f, w=None):
    C = f.shape[0]
    x = f.reshape(C, -1)
    if w is None:
        mu = x.mean(axis=1)
        var = ((x - mu[:, None]) ** 2).mean(axis=1)
    else:
        wn = w.reshape(-1) / w.sum()
        mu = (x * wn).sum(axis=1)
        var = (((x - mu[:, None]) ** 2) * wn).sum(axis=1)
    return mu, np.sqrt(np.maximum(var, 1e-12))


def test_style_energy_fixed_point_and_positive(ext):
    x = style_image("checker", 3)
    assert style_energy(x, x, ext).item() <= 1e-9
    assert style_energy(np.full((3, 32, 32), 0.5), style_image("stripes", 4), ext).item() > 0


def test_style_energy_stats_oracle(ext):
    rng = np.random.default_rng(3)
    for _ in range(3):
        img, sty = rng.uniform(size=(3, 32, 32)), rng.uniform(size=(3, 32, 32))
        expected = 0.0
        for f, fs in zip(ext.features(img), ext.features(sty)):
            (mu, sd), (mus, sds) = np_stats(f.data), np_stats(fs.data)
            expected += np.linalg.norm(mu - mus) + np.linalg.norm(sd - sds)
        assert style_energy(img, sty, ext).item() == pytest.approx(expected, rel=1e-12)


def test_style_energy_region_mask_oracle(ext):
    from freetuner.control import area_resize

    rng = np.random.default_rng(4)
    img, sty = rng.uniform(size=(3, 32, 32)), rng.uniform(size=(3, 32, 32))
    region = np.zeros((32, 32))
    region[4:20, 8:30] = 1
    expected = 0.0
    for f, fs in zip(ext.features(img), ext.features(sty)):
        w = area_resize(region, *f.shape[1:])
        (mu, sd), (mus, sds) = np_stats(f.data, w), np_stats(fs.data)
        expected += np.linalg.norm(mu - mus) + np.linalg.norm(sd - sds)
    assert style_energy(img, sty, ext, region_mask=region).item() == pytest.approx(expected, rel=1e-12)


def test_style_energy_resizes_to_style_extent(ext):
    img = np.random.default_rng(5).uniform(size=(3, 8, 8))
    sty = style_image("dots", 2)
    up = ops.bilinear_resize(Tensor(img), 32, 32).data
    assert style_energy(img, sty, ext).item() == pytest.approx(style_energy(up, sty, ext).item(), rel=1e-14)


def np_adain(c, s):
    mc, sc = np_stats(c)
    ms, ss = np_stats(s)
    return (c - mc[:, None, None]) / sc[:, None, None] * ss[:, None, None] + ms[:, None, None]


def test_content_energy_oracles(ext):
    rng = np.random.default_rng(6)
    img, subj, sty = (rng.uniform(size=(3, 32, 32)) for _ in range(3))
    expected = sum(np.linalg.norm(f.data - np_adain(fc.data, fs.data))
                   for f, fc, fs in zip(ext.features(img), ext.features(subj), ext.features(sty)))
    assert content_energy(img, subj, sty, ext).item() == pytest.approx(expected, rel=1e-11)
    # style == subject: the target is the subject's own features
    same = sum(np.linalg.norm(f.data - fc.data) for f, fc in zip(ext.features(img), ext.features(subj)))
    assert content_energy(img, subj, subj, ext).item() == pytest.approx(same, rel=1e-9)
    assert content_energy(subj, subj, subj, ext).item() <= 1e-9


def test_energies_non_negative(ext):
    rng = np.random.default_rng(7)
    for _ in range(5):
        a, b, c = (rng.uniform(size=(3, 16, 16)) for _ in range(3))
        assert style_energy(a, b, ext).item() >= 0
        assert content_energy(a, b, c, ext).item() >= 0
        assert structure_energy(a, edges(b).data).item() >= 0


def test_structure_energy_fixed_point():
    x = toy_sample(4).image
    assert structure_energy(x, edges(x).data).item() == 0.0


# -- latent gradients against finite differences ---------------------------------------------

def _latent_energy(model, schedule, t, fn):
    ctx = tokenize(PROMPT)

    def build(z):
        eps, recs = predict_eps(model, z, t, ctx, record=True)
        return fn(decode(predict_x0(z, t, eps, schedule)), recs)
    return build


def _fd_check(build, z, tol=1e-4):
    a = analytic_grad(build, z)
    n = central_diff(lambda v: build(Tensor(v)).item(), z, 1e-6)
    err = rel_errors(a, n)
    assert np.mean(err <= tol) >= 0.98, np.sort(err)[-5:]
    assert np.linalg.norm(a - n) <= tol * max(np.linalg.norm(n), 1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_style_energy_latent_gradient(seeded_model, schedule, ext, seed):
    z = np.random.default_rng(seed).normal(size=(12, 4, 4))
    sty = style_image("stripes", seed)
    _fd_check(_latent_energy(seeded_model, schedule, 20, lambda img, r: style_energy(img, sty, ext)), z)


@pytest.mark.parametrize("seed", [0, 1])
def test_content_energy_latent_gradient(seeded_model, schedule, ext, seed):
    rng = np.random.default_rng(10 + seed)
    z = rng.normal(size=(12, 4, 4))
    subj, sty = toy_sample(seed).image, style_image("dots", seed)
    _fd_check(_latent_energy(seeded_model, schedule, 30,
                             lambda img, r: content_energy(img, subj, sty, ext)), z)


def test_spatial_energy_latent_gradient(seeded_model, schedule):
    z = np.random.default_rng(3).normal(size=(12, 4, 4))
    box = BoxRegion(0, 0, 4, 6, image_size=(8, 8))
    pos = tokenize(PROMPT).word_index_map["circle"]
    _fd_check(_latent_energy(seeded_model, schedule, 40, lambda img, r: spatial_energy(r, pos, box)), z)


def test_structure_energy_latent_gradient(seeded_model, schedule):
    z = np.random.default_rng(4).normal(size=(12, 4, 4))
    target = edges(np.random.default_rng(5).uniform(size=(3, 8, 8))).data
    _fd_check(_latent_energy(seeded_model, schedule, 25, lambda img, r: structure_energy(img, target)), z)


# -- guided prediction -------------------------------------------------------------------------

def test_zero_weights_equal_cfg(seeded_model, schedule, ext):
    z = np.random.default_rng(0).normal(size=(12, 16, 16))
    sty = style_image("checker", 0)
    terms = [EnergyTerm("style", 0.0, lambda st: style_energy(st.image, sty, ext))]
    with no_grad():
        ref = cfg_eps(seeded_model, Tensor(z), 30, PROMPT, "", 3.0).data
    out = guided_eps(seeded_model, z, 30, PROMPT, "", 3.0, terms, stage="style", schedule=schedule)
    assert np.array_equal(out.eps.data, ref)
    assert np.array_equal(guided_eps(seeded_model, z, 30, PROMPT, "", 3.0).eps.data, ref)


def test_quadratic_energy_adds_displacement(seeded_model, schedule):
    z = np.random.default_rng(1).normal(size=(12, 16, 16))
    c = np.random.default_rng(2).normal(size=(12, 16, 16))
    term = EnergyTerm("spatial", 1.0, lambda st: ops.mul(ops.sum(ops.square(ops.sub(st.z, c))), 0.5))
    out = guided_eps(seeded_model, z, 17, PROMPT, "", 0.0, [term], schedule=schedule, clip=None)
    with no_grad():
        eps_y, _ = predict_eps(seeded_model, Tensor(z), 17, PROMPT)
    assert np.allclose(out.eps.data, eps_y.data + (z - c), rtol=0, atol=1e-12)


def test_clipping_bounds_each_term(seeded_model, schedule):
    z = np.zeros((12, 16, 16))
    c = np.full((12, 16, 16), 2.0)
    term = EnergyTerm("spatial", 1.0, lambda st: ops.mul(ops.sum(ops.square(ops.sub(st.z, c))), 0.5))
    out = guided_eps(seeded_model, z, 17, PROMPT, "", 0.0, [term], schedule=schedule, clip=10.0)
    delta = out.eps.data - out.eps_cond.data
    assert np.linalg.norm(delta) == pytest.approx(10.0, rel=1e-12)
    assert out.trace[0][2] == pytest.approx(np.linalg.norm(c), rel=1e-12)
    g, n = clip_norm(np.ones(4), 1.0)
    assert n == 2.0 and np.allclose(g, 0.5)


def test_stage_rules_and_failures(seeded_model, schedule):
    z = np.zeros((12, 16, 16))
    bad = EnergyTerm("style", 1.0, lambda st: ops.sum(st.z))
    with pytest.raises(InvalidArgument):
        guided_eps(seeded_model, z, 5, PROMPT, "", 3.0, [bad], stage="content", schedule=schedule)
    with pytest.raises(InvalidArgument):
        guided_eps(seeded_model, z, 5, PROMPT, "", 3.0,
                   [EnergyTerm("spatial", 1.0, lambda st: ops.sum(st.z))], stage="style", schedule=schedule)
    with pytest.raises(InvalidArgument):
        EnergyTerm("style", -1.0, lambda st: None)
    nan = EnergyTerm("spatial", 1.0, lambda st: ops.sum(ops.sqrt(ops.sub(st.z, 1.0))))
    with pytest.raises(GuidanceFailure) as info, np.errstate(invalid="ignore"):
        guided_eps(seeded_model, z, 5, PROMPT, "", 3.0, [nan], schedule=schedule)
    assert info.value.kind == "spatial" and info.value.t == 5


def test_hook_only_touches_conditional_pass(seeded_model, schedule):
    z = np.random.default_rng(3).normal(size=(12, 16, 16))
    calls = []

    def hook(layer_id, kind, attn):
        calls.append(layer_id)
        return attn
    guided_eps(seeded_model, z, 9, PROMPT, "", 3.0, hook=hook, schedule=schedule)
    assert calls == list(range(6))


def test_style_gradient_step_descends(seeded_model, schedule, ext):
    """Backtracking over {1e-1..1e-4} finds a decrease of g_s on most fixtures."""
    ctx = tokenize(PROMPT)
    wins, n = 0, 20
    for k in range(n):
        rng = np.random.default_rng(100 + k)
        z = rng.normal(size=(12, 4, 4))
        t = int(rng.integers(18, 50))
        sty = style_image(("stripes", "checker", "dots")[k % 3], k)

        def g(v):
            eps, _ = predict_eps(seeded_model, v, t, ctx)
            return style_energy(decode(predict_x0(v, t, eps, schedule)), sty, ext)
        grad_z = analytic_grad(g, z)
        with no_grad():
            g0 = g(Tensor(z)).item()
            ok = any(g(Tensor(z - eta * 3.0 * grad_z)).item() < g0 for eta in (1e-1, 1e-2, 1e-3, 1e-4))
        wins += ok
    assert wins >= 0.95 * n

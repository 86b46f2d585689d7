import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmed_atl.atm import (
    ROTATIONS,
    SCALES,
    TRANSLATIONS,
    ViewBatch,
    apply_view,
    atm_sample_views,
)
from fedmed_atl.imaging import NEAREST, Slice2D, rotate, translate
from fedmed_atl.losses import (
    DiscriminatorComponents,
    GeneratorComponents,
    LossWeights,
    adversarial_loss_d,
    adversarial_loss_g,
    atl_components,
    aux_rotation_loss,
    aux_scaling_loss,
    aux_translation_loss,
    cycle_loss,
    total_discriminator_loss,
    total_generator_loss,
)
from fedmed_atl.networks import init_discriminator

LN2, LN3, LN4 = math.log(2), math.log(3), math.log(4)


def image(seed=0, n=64):
    return Slice2D(np.random.default_rng(seed).uniform(-1, 1, (n, n)))


# --- class sets and views -------------------------------------------------

def test_class_sets():
    assert ROTATIONS == (0, 90, 180, 270)
    assert TRANSLATIONS == ((-30, -30), (-30, 30), (30, -30), (30, 30))
    assert SCALES == (0.9, 1.1, 1.2)


def test_four_views_cover_rotations():
    for seed in range(50):
        vb = atm_sample_views(image(), 4, np.random.default_rng(seed))
        assert len(vb) == 12
        assert sorted(vb.rot_labels) == [0, 1, 2, 3]
        assert sorted(vb.trans_labels) == [0, 1, 2, 3]
        assert set(vb.scale_labels) == {0, 1, 2} and len(vb.scale_labels) == 4


@pytest.mark.parametrize("k", [1, 2])
def test_small_k_draws_without_replacement(k):
    for seed in range(50):
        vb = atm_sample_views(image(), k, np.random.default_rng(seed))
        assert len(vb) == 3 * k
        for labels in (vb.rot_labels, vb.trans_labels, vb.scale_labels):
            assert len(set(labels)) == k


def test_invalid_k():
    with pytest.raises(ValueError):
        atm_sample_views(image(), 3, np.random.default_rng(0))


def test_zero_rotation_view_is_input():
    img = image(1)
    for seed in range(20):
        vb = atm_sample_views(img, 4, np.random.default_rng(seed))
        zero = vb.rot_views[list(vb.rot_labels).index(0)]
        assert np.array_equal(zero, img.pixels)


def test_batch_views_and_entries():
    imgs = np.stack([image(s, 32).pixels for s in range(3)])
    vb = atm_sample_views(imgs, 2, np.random.default_rng(0), source_kind="fake")
    assert vb.rot_views.shape == (6, 32, 32)
    assert vb.source_kind == "fake"
    entries = vb.views
    assert len(entries) == 18
    assert {kind for _, kind, _ in entries} == {"rot", "trans", "scale"}


def test_view_labels_recoverable_by_inverse_matching():
    img = image(3, 64)
    vb = atm_sample_views(img, 4, np.random.default_rng(7))
    for view, label in zip(vb.rot_views, vb.rot_labels):
        matches = [c for c, deg in enumerate(ROTATIONS)
                   if np.array_equal(rotate(Slice2D(view), -deg, NEAREST).pixels,
                                     rotate(rotate(img, deg, NEAREST), -deg, NEAREST).pixels)]
        assert matches == [label]
    for view, label in zip(vb.trans_views, vb.trans_labels):
        matches = [c for c, (dx, dy) in enumerate(TRANSLATIONS)
                   if np.array_equal(view, translate(img, dx, dy, NEAREST).pixels)]
        assert matches == [label]


def test_apply_view_rejects_unknown_kind():
    with pytest.raises(ValueError):
        apply_view(image().pixels, "shear", 0)


# --- classification losses ------------------------------------------------

@pytest.mark.parametrize("fn,k", [(aux_rotation_loss, 4), (aux_translation_loss, 4), (aux_scaling_loss, 3)])
def test_uniform_logits_give_log_k(fn, k):
    labels = torch.arange(6) % k
    for lam in (1.0, 0.5, 2.0):
        assert fn(torch.zeros(6, k), labels, lam).item() == pytest.approx(lam * math.log(k), abs=1e-6)


@pytest.mark.parametrize("fn,k", [(aux_rotation_loss, 4), (aux_translation_loss, 4), (aux_scaling_loss, 3)])
def test_perfect_prediction_gives_zero(fn, k):
    labels = torch.arange(k)
    logits = torch.full((k, k), -1000.0)
    logits[labels, labels] = 1000.0
    assert fn(logits, labels, 1.0).item() == 0.0


def test_classification_loss_linearity_and_zero_weight():
    logits = torch.randn(5, 4, generator=torch.Generator().manual_seed(0))
    labels = torch.tensor([0, 1, 2, 3, 0])
    one = aux_rotation_loss(logits, labels, 1.0)
    assert aux_rotation_loss(logits, labels, 2.0).item() == pytest.approx(2 * one.item(), rel=1e-12)
    assert aux_translation_loss(logits, labels, 0.0).item() == 0.0


def test_single_sample_equals_per_sample_value():
    logits = torch.tensor([[0.3, -1.2, 2.0]])
    expected = -math.log(math.exp(-1.2) / sum(math.exp(v) for v in (0.3, -1.2, 2.0)))
    assert aux_scaling_loss(logits, [1], 1.0).item() == pytest.approx(expected, rel=1e-6)


def test_classification_loss_errors():
    with pytest.raises(ValueError):
        aux_rotation_loss(torch.zeros(2, 4), torch.tensor([0, 4]))
    with pytest.raises(ValueError):
        aux_scaling_loss(torch.zeros(2, 4), torch.tensor([0, 1]))


def test_extreme_logits_stay_finite():
    logits = torch.tensor([[1e4, -1e4, 0.0, 0.0]])
    assert math.isfinite(aux_rotation_loss(logits, [1]).item())


# --- adversarial and cycle losses -----------------------------------------

def test_adversarial_values():
    half = torch.full((4,), 0.5)
    assert adversarial_loss_d(half, half).item() == pytest.approx(2 * LN2, abs=1e-6)
    assert adversarial_loss_g(half).item() == pytest.approx(LN2, abs=1e-6)
    near = adversarial_loss_d(torch.full((4,), 1 - 1e-9), torch.full((4,), 1e-9)).item()
    assert 0 <= near < 1e-5
    # exact 0 / 1 are clamped, never infinite
    assert math.isfinite(adversarial_loss_d(torch.zeros(2), torch.ones(2)).item())
    assert math.isfinite(adversarial_loss_g(torch.zeros(2)).item())


def test_cycle_loss_values():
    x = torch.rand(2, 1, 8, 8)
    y = torch.rand(2, 1, 8, 8)
    assert cycle_loss(x, x, y, y, 10.0).item() == 0.0
    assert cycle_loss(x, x + 0.1, y, y, 10.0).item() == pytest.approx(1.0, abs=1e-6)
    assert cycle_loss(x, x - 0.05, y, y + 0.05, 10.0).item() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        cycle_loss(x, x[:, :, :4], y, y)


# --- totals ---------------------------------------------------------------

def test_generator_total():
    w = LossWeights()
    assert total_generator_loss(GeneratorComponents(), w) == 0
    assert total_generator_loss(GeneratorComponents(1, 1, 1, 1, 1), w) == 14
    only_cyc = LossWeights(adv=0, cyc=10, rot=0, trans=0, scale=0)
    assert total_generator_loss(GeneratorComponents(3, 0.25, 5, 7, 9), only_cyc) == 2.5


def test_discriminator_total():
    w = LossWeights()
    assert total_discriminator_loss(DiscriminatorComponents(adv=1.5), w) == 1.5
    value = total_discriminator_loss(DiscriminatorComponents(2 * LN2, LN4, LN4, LN4), w)
    assert value == pytest.approx(2 * LN2 + 0.5 * 3 * LN4, abs=1e-9)
    assert value == pytest.approx(3.465736, abs=1e-6)


def test_loss_weight_variants():
    w = LossWeights().only("rot")
    assert (w.rot, w.trans, w.scale, w.d_rot, w.d_trans, w.d_scale) == (1, 0, 0, 0.5, 0, 0)
    assert not LossWeights().only().uses_atm
    with pytest.raises(ValueError):
        LossWeights(cyc=-1)


# --- auxiliary terms through the critic -----------------------------------

def test_atl_mode_separation():
    d = init_discriminator(2, 3, seed=0)
    imgs = np.stack([image(s, 16).pixels for s in range(2)])
    rng = np.random.default_rng(0)
    real = atm_sample_views(imgs, 1, rng, "real")
    fake = atm_sample_views(imgs, 1, rng, "fake")
    with pytest.raises(ValueError):
        atl_components(d, [real, fake], "generator")
    with pytest.raises(ValueError):
        atl_components(d, [fake], "generator")
    with pytest.raises(ValueError):
        atl_components(d, [real], "discriminator")
    g = atl_components(d, [real], "generator")
    assert set(g) == {"rot", "trans", "scale"}
    both = atl_components(d, [real, fake], "discriminator", kinds=["rot"])
    assert set(both) == {"rot"}


def test_atl_pools_real_and_fake_equally():
    d = init_discriminator(2, 3, seed=1).double()
    imgs = np.stack([image(s, 16).pixels for s in range(2)])
    real = atm_sample_views(imgs, 2, np.random.default_rng(0), "real")
    fake = atm_sample_views(-imgs, 2, np.random.default_rng(1), "fake")
    pooled = atl_components(d, [real, fake], "discriminator", dtype=torch.float64)
    only_real = atl_components(d, [real], "generator", dtype=torch.float64)
    fake_as_real = ViewBatch(**{**fake.__dict__, "source_kind": "real"})
    only_fake = atl_components(d, [fake_as_real], "generator", dtype=torch.float64)
    for kind in pooled:
        assert pooled[kind].item() == pytest.approx((only_real[kind].item() + only_fake[kind].item()) / 2, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.floats(0, 5))
def test_losses_non_negative(seed, n, lam):
    g = torch.Generator().manual_seed(seed)
    logits4 = torch.randn(n, 4, generator=g) * 5
    logits3 = torch.randn(n, 3, generator=g) * 5
    labels = torch.randint(0, 3, (n,), generator=g)
    assert aux_rotation_loss(logits4, labels, lam).item() >= 0
    assert aux_translation_loss(logits4, labels, lam).item() >= 0
    assert aux_scaling_loss(logits3, labels, lam).item() >= 0
    p, q = torch.rand(n, generator=g), torch.rand(n, generator=g)
    assert adversarial_loss_d(p, q).item() >= 0
    assert adversarial_loss_g(q).item() >= 0


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12))
def test_uniform_calibration_for_any_class_count(k):
    from fedmed_atl.losses import _classification_loss

    labels = torch.arange(10) % k
    assert _classification_loss(torch.zeros(10, k), labels, 1.0, k).item() == pytest.approx(math.log(k), abs=1e-6)

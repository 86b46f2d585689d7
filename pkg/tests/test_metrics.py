import math

import numpy as np
import pytest

from fedmed_atl.checkpoint import CheckpointError, load_checkpoint, restore_discriminator, restore_generator, save_checkpoint
from fedmed_atl.federated import TrainConfig, init_server, make_client
from fedmed_atl.imaging import Slice2D
from fedmed_atl.metrics import (
    MetricsReport,
    SsimConstants,
    evaluate,
    identity_generator,
    mae,
    psnr,
    score_images,
    ssim,
)
from fedmed_atl.mud import aligned_pairs, hospital_scenario, partition_clients
from fedmed_atl.networks import NetConfig, parameters_as_vector
from fedmed_atl.phantom import PhantomSpec, generate_phantom, phantom_remap


def brute_ssim(t, g, c1=0.01, c2=0.03):
    """Loop-based reference with population statistics."""
    t, g = t.ravel().tolist(), g.ravel().tolist()
    n = len(t)
    mt = sum(t) / n
    mg = sum(g) / n
    vt = sum((a - mt) ** 2 for a in t) / n
    vg = sum((b - mg) ** 2 for b in g) / n
    cv = sum((a - mt) * (b - mg) for a, b in zip(t, g)) / n
    return ((2 * mt * mg + c1) * (2 * cv + c2)) / ((mt * mt + mg * mg + c1) * (vt + vg + c2))


# --- hand values ----------------------------------------------------------

def test_constant_images():
    t, g = np.zeros((8, 8)), np.full((8, 8), 0.5)
    assert mae(t, g) == 0.5
    assert psnr(t, g) == pytest.approx(-10 * math.log10(0.25))
    # means 0 and 0.5, zero variances: (0.01)(0.03) / ((0.25 + 0.01)(0.03))
    assert ssim(t, g) == pytest.approx(0.01 / 0.26, rel=1e-12)


def test_identical_images():
    img = np.random.default_rng(0).random((16, 16))
    assert mae(img, img) == 0
    assert psnr(img, img) == math.inf
    assert ssim(img, img) == 1.0


def test_extreme_constant_images():
    t, g = np.zeros((8, 8)), np.ones((8, 8))
    assert psnr(t, g) == 0.0
    assert round(ssim(t, g), 6) == round(0.01 / 1.01, 6)
    assert ssim(t, g) == pytest.approx(0.01 / 1.01, rel=1e-12)
    assert psnr(t, np.full((8, 8), 0.1)) == pytest.approx(20.0, abs=1e-12)


def test_fixed_4x4_against_brute_force():
    t = np.arange(16, dtype=float).reshape(4, 4) / 15
    g = np.array([[0.0, 0.2, 0.1, 0.9], [0.3, 0.3, 0.5, 0.4], [1.0, 0.6, 0.7, 0.2], [0.8, 0.1, 0.05, 0.5]])
    assert abs(ssim(t, g) - brute_ssim(t, g)) < 1e-12


def test_psnr_decreases_with_mse():
    t = np.zeros((8, 8))
    values = [psnr(t, np.full((8, 8), d)) for d in (0.05, 0.1, 0.2, 0.4)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_psnr_hand_value():
    t = np.zeros((8, 8))
    g = t.copy()
    g[0, 0] = 1.0  # MSE = 1/64
    assert psnr(t, g) == pytest.approx(10 * math.log10(64), rel=1e-12)


def test_slice_inputs_and_shape_mismatch():
    a = Slice2D(np.zeros((8, 8)), (0, 1))
    assert mae(a, np.ones((8, 8))) == 1.0
    with pytest.raises(ValueError):
        mae(np.zeros((8, 8)), np.zeros((8, 9)))


def test_ssim_constants():
    assert SsimConstants() == SsimConstants(0.01, 0.03)
    std = SsimConstants.standard()
    assert (std.c1, std.c2) == pytest.approx((1e-4, 9e-4))
    with pytest.raises(ValueError):
        SsimConstants(0, 1)


def test_ssim_against_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(50):
        t, g = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(t, g) == pytest.approx(brute_ssim(t, g), abs=1e-9)
        assert mae(t, g) == pytest.approx(sum(abs(a - b) for a, b in zip(t.ravel(), g.ravel())) / 256, abs=1e-12)


def test_metric_symmetry_and_transposition():
    rng = np.random.default_rng(2)
    for _ in range(20):
        t, g = rng.random((12, 16)), rng.random((12, 16))
        for f in (mae, psnr, ssim):
            assert f(t, g) == pytest.approx(f(g, t), rel=1e-12)
            assert f(t, g) == pytest.approx(f(t.T, g.T), rel=1e-12)


def test_ssim_bounds():
    rng = np.random.default_rng(3)
    for _ in range(20):
        t = rng.random((8, 8))
        assert -1 <= ssim(t, 1 - t) <= 1
        assert ssim(t, rng.random((8, 8))) < ssim(t, t)


# --- reports and the harness -----------------------------------------------

def test_report_means_by_hand():
    truths = [np.zeros((8, 8)), np.zeros((8, 8))]
    outs = [np.full((8, 8), 0.1), np.full((8, 8), 0.3)]
    rep = score_images(truths, outs)
    assert rep.mae == pytest.approx(0.2)
    assert rep.psnr == pytest.approx((20 + -10 * math.log10(0.09)) / 2)
    assert rep.n_images == 2 and rep.n_psnr_infinite == 0


def test_report_excludes_infinite_psnr():
    img = np.full((8, 8), 0.2)
    rep = score_images([img, img], [img, np.full((8, 8), 0.3)])
    assert rep.n_psnr_infinite == 1
    assert rep.psnr == pytest.approx(20.0)
    with pytest.raises(ValueError):
        MetricsReport.from_records([])


def test_beats_is_strict_on_all_metrics():
    good = MetricsReport(0.1, 20, 0.9, 1)
    assert good.beats(MetricsReport(0.2, 15, 0.8, 1))
    assert not good.beats(MetricsReport(0.2, 25, 0.8, 1))
    assert not good.beats(good)


@pytest.fixture(scope="module")
def holdout_pairs():
    return aligned_pairs(generate_phantom(PhantomSpec(n_volumes=3, slices_per_volume=2, image_size=16, seed=4)))


def test_perfect_generator_scores_perfectly(holdout_pairs):
    lookup = {p.img_a.pixels.tobytes(): p.img_b.pixels for p in holdout_pairs}
    rep = evaluate(lambda imgs: np.stack([lookup[i.tobytes()] for i in imgs]), holdout_pairs)
    assert rep.mae == 0 and rep.n_psnr_infinite == len(holdout_pairs)
    assert rep.psnr == math.inf and rep.ssim == 1.0


def test_evaluate_averages_per_image_scores(holdout_pairs):
    rep = evaluate(identity_generator, holdout_pairs)
    manual = [mae((p.img_b.pixels + 1) / 2, (p.img_a.pixels + 1) / 2) for p in holdout_pairs]
    assert rep.mae == pytest.approx(np.mean(manual), abs=1e-12)
    assert len(rep.per_image) == len(holdout_pairs)


def test_remap_oracle_beats_identity(holdout_pairs):
    def oracle(imgs):
        return phantom_remap((imgs + 1) / 2) * 2 - 1

    assert evaluate(oracle, holdout_pairs).beats(evaluate(identity_generator, holdout_pairs))


def test_evaluate_needs_pairs():
    with pytest.raises(ValueError):
        evaluate(identity_generator, [])


# --- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    corpus = generate_phantom(PhantomSpec(n_volumes=20, slices_per_volume=1, image_size=16, seed=0))
    ds = partition_clients(corpus, hospital_scenario("slight"), np.random.default_rng(0))
    net = NetConfig(1, 2, 2, 2, 16)
    cfg = TrainConfig(net=net)
    clients = [make_client(d, cfg, i) for i, d in enumerate(ds)]
    server = init_server(cfg, clients)
    path = save_checkpoint(tmp_path / "ck" / "round_000.fmck", server, clients, {"seed": 0})
    meta, sections = load_checkpoint(path)
    assert meta["round_index"] == 0 and meta["seed"] == 0
    assert set(sections) == {"gen_ab", "gen_ba"} | {f"client/{c.client_id}/disc_{m}" for c in clients for m in "ab"}
    g = restore_generator(sections, "gen_ab", net)
    assert np.array_equal(parameters_as_vector(g).numpy(), parameters_as_vector(server.gen_ab).numpy())
    d = restore_discriminator(sections, "client/client2/disc_b", net)
    assert np.array_equal(parameters_as_vector(d).numpy(), parameters_as_vector(clients[1].disc_b).numpy())


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.fmck"
    bad.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(b"FMCKPT\x00\x00" + b"\x01\x00\x00\x00")
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)


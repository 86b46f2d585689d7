import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmed_atl.imaging import (
    BILINEAR,
    NEAREST,
    AffineParams,
    InterpSpec,
    Slice2D,
    apply_affine,
    center_crop,
    normalize,
    rescale,
    rotate,
    translate,
)

ZERO_FILL = InterpSpec("nearest", 0.0)


def hot(r, c, n=8, value=1.0):
    px = np.zeros((n, n))
    px[r, c] = value
    return Slice2D(px, (0.0, 1.0))


def quarter_turn_oracle(r, c, quarters, n=8):
    """Where a pixel lands after `quarters` counterclockwise quarter turns."""
    for _ in range(quarters % 4):
        r, c = n - 1 - c, r
    return r, c


def shift_oracle(r, c, dx, dy, n=8):
    r2, c2 = r + dy, c + dx
    return (r2, c2) if 0 <= r2 < n and 0 <= c2 < n else None


def random_slice(rng, h=8, w=8):
    return Slice2D(rng.uniform(-1, 1, size=(h, w)))


# --- Slice2D ---------------------------------------------------------------

def test_slice_rejects_out_of_range_and_nonfinite():
    with pytest.raises(ValueError):
        Slice2D(np.full((8, 8), 1.5))
    with pytest.raises(ValueError):
        Slice2D(np.full((8, 8), np.nan))
    with pytest.raises(ValueError):
        Slice2D(np.zeros((4, 8)))


def test_affine_params_validation():
    with pytest.raises(ValueError):
        AffineParams(scale_ratio=0.0)
    with pytest.raises(ValueError):
        AffineParams(rotation_deg=math.inf)
    assert AffineParams(rotation_deg=270).rotation_deg == -90
    assert AffineParams(rotation_deg=-190).rotation_deg == 170


def test_fill_must_lie_in_value_range():
    with pytest.raises(ValueError):
        rotate(hot(0, 0), 30, InterpSpec("bilinear", 2.0))


# --- rotate ----------------------------------------------------------------

def test_rotate_zero_and_full_turn_are_identity():
    x = random_slice(np.random.default_rng(0))
    assert np.array_equal(rotate(x, 0, NEAREST).pixels, x.pixels)
    assert np.array_equal(rotate(x, 0, BILINEAR).pixels, x.pixels)
    assert np.array_equal(rotate(x, 360, NEAREST).pixels, x.pixels)


def test_rotate_matches_rot90_convention():
    x = random_slice(np.random.default_rng(1))
    for q in range(4):
        assert np.array_equal(rotate(x, 90 * q, NEAREST).pixels, np.rot90(x.pixels, q))


@pytest.mark.parametrize("quarters", [1, 2, 3])
def test_rotate_hot_pixel_sweep(quarters):
    for r in range(8):
        for c in range(8):
            out = rotate(hot(r, c), 90 * quarters, ZERO_FILL).pixels
            expected = np.zeros((8, 8))
            expected[quarter_turn_oracle(r, c, quarters)] = 1.0
            assert np.array_equal(out, expected), (r, c)


def test_rotate_twice_90_equals_180():
    for r in range(8):
        for c in range(8):
            x = hot(r, c)
            twice = rotate(rotate(x, 90, NEAREST), 90, NEAREST)
            assert np.array_equal(twice.pixels, rotate(x, 180, NEAREST).pixels)


def test_rotate_rejects_nonfinite():
    with pytest.raises(ValueError):
        rotate(hot(1, 1), math.nan)


def test_rotate_fills_corners_with_background():
    x = Slice2D(np.ones((16, 16)), (0.0, 1.0))
    out = rotate(x, 45, BILINEAR).pixels
    assert out[0, 0] == 0.0 and out[8, 8] == 1.0


# --- translate -------------------------------------------------------------

def test_translate_identity():
    x = random_slice(np.random.default_rng(2))
    assert np.array_equal(translate(x, 0, 0).pixels, x.pixels)


def test_translate_hot_pixel_example():
    out = translate(hot(2, 3), 2, 1, ZERO_FILL).pixels
    # hot pixel at row 2, col 3 moves right by 2 and down by 1
    expected = np.zeros((8, 8))
    expected[3, 5] = 1.0
    assert np.array_equal(out, expected)


@pytest.mark.parametrize("dx,dy", [(-30, -30), (-30, 30), (30, -30), (30, 30), (2, -3), (-1, 4), (7, 0)])
def test_translate_hot_pixel_sweep(dx, dy):
    for r in range(8):
        for c in range(8):
            out = translate(hot(r, c), dx, dy, ZERO_FILL).pixels
            expected = np.zeros((8, 8))
            target = shift_oracle(r, c, dx, dy)
            if target is not None:
                expected[target] = 1.0
            assert np.array_equal(out, expected), (r, c)


def test_translate_full_eviction():
    x = Slice2D(np.random.default_rng(3).uniform(0, 1, (8, 8)), (0.0, 1.0))
    assert np.all(translate(x, 8, 0, InterpSpec("bilinear", 0.0)).pixels == 0.0)


def test_translate_vacated_pixels_take_fill():
    x = Slice2D(np.ones((8, 8)), (0.0, 1.0))
    out = translate(x, 3, 0, InterpSpec("nearest", 0.25)).pixels
    assert np.all(out[:, :3] == 0.25) and np.all(out[:, 3:] == 1.0)


# --- rescale ---------------------------------------------------------------

def test_rescale_identity_and_constant():
    x = random_slice(np.random.default_rng(4))
    assert np.array_equal(rescale(x, 1.0).pixels, x.pixels)
    c = Slice2D(np.full((10, 10), 0.3), (0.0, 1.0))
    for ratio in (1.0, 1.1, 1.2, 2.0):
        assert np.allclose(rescale(c, ratio, BILINEAR).pixels, 0.3, atol=1e-15)


def test_rescale_doubling_hot_pixel():
    # brute force: an output pixel x reads source round(3.5 + (x - 3.5) / 2)
    for r in range(8):
        for c in range(8):
            out = rescale(hot(r, c), 2.0, ZERO_FILL).pixels
            expected = np.zeros((8, 8))
            for y in range(8):
                for x in range(8):
                    sy = math.floor(3.5 + (y - 3.5) / 2 + 0.5)
                    sx = math.floor(3.5 + (x - 3.5) / 2 + 0.5)
                    if (sy, sx) == (r, c):
                        expected[y, x] = 1.0
            assert np.array_equal(out, expected)
            rows, cols = np.nonzero(out)
            inside = [(2 * r - 4 + i, 2 * c - 4 + j) for i in (0, 1) for j in (0, 1)]
            inside = [(a, b) for a, b in inside if 0 <= a < 8 and 0 <= b < 8]
            assert sorted(zip(rows, cols)) == sorted(inside)


def test_rescale_rejects_nonpositive():
    with pytest.raises(ValueError):
        rescale(hot(0, 0), 0.0)
    with pytest.raises(ValueError):
        rescale(hot(0, 0), -1.0)


def test_rescale_shrink_pads_border():
    x = Slice2D(np.ones((16, 16)), (0.0, 1.0))
    out = rescale(x, 0.5, BILINEAR).pixels
    assert out[0, 0] == 0.0 and out[8, 8] == 1.0


# --- apply_affine ----------------------------------------------------------

def test_apply_affine_identity_and_neutral_components():
    x = random_slice(np.random.default_rng(5))
    assert np.array_equal(apply_affine(x, AffineParams()).pixels, x.pixels)
    p = AffineParams(rotation_deg=33.0)
    assert np.array_equal(apply_affine(x, p).pixels, rotate(x, 33.0).pixels)


def test_apply_affine_hot_pixel_composition():
    for r in range(8):
        for c in range(8):
            out = apply_affine(hot(r, c), AffineParams(90, 2, 0, 1.0), ZERO_FILL).pixels
            expected = np.zeros((8, 8))
            target = shift_oracle(*quarter_turn_oracle(r, c, 1), 2, 0)
            if target is not None:
                expected[target] = 1.0
            assert np.array_equal(out, expected)


def test_apply_affine_composition_on_random_images():
    rng = np.random.default_rng(6)
    for _ in range(100):
        x = Slice2D(rng.uniform(-1, 1, size=(rng.integers(8, 17), rng.integers(8, 17))))
        p = AffineParams(rng.uniform(-180, 180), rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.8, 1.3))
        for interp, tol in ((NEAREST, 0.0), (BILINEAR, 1e-6)):
            seq = rescale(translate(rotate(x, p.rotation_deg, interp), p.translate_x, p.translate_y, interp),
                          p.scale_ratio, interp)
            assert np.max(np.abs(apply_affine(x, p, interp).pixels - seq.pixels)) <= tol


# --- crop / normalize ------------------------------------------------------

def test_center_crop():
    ramp = Slice2D(np.arange(100, dtype=float).reshape(10, 10) / 100, (0.0, 1.0))
    assert np.array_equal(center_crop(ramp, 10, 10).pixels, ramp.pixels)
    assert np.array_equal(center_crop(ramp, 8, 8).pixels, ramp.pixels[1:9, 1:9])
    # odd leftover: window leans top-left
    assert np.array_equal(center_crop(ramp, 9, 9).pixels, ramp.pixels[0:9, 0:9])
    big = Slice2D(np.zeros((256, 256)))
    with pytest.raises(ValueError):
        center_crop(big, 300, 300)


def test_normalize_examples():
    x = Slice2D(np.full((8, 8), 0.5), (0.0, 1.0))
    assert np.array_equal(normalize(x, (0, 1), (0, 1)).pixels, x.pixels)
    assert np.all(normalize(x, (0, 1), (-1, 1)).pixels == 0.0)
    q = Slice2D(np.full((8, 8), 0.25), (0.0, 1.0))
    assert np.all(normalize(q, (0, 1), (-1, 1)).pixels == -0.5)
    with pytest.raises(ValueError):
        normalize(x, (1, 1), (0, 1))


# --- properties ------------------------------------------------------------

images = st.builds(
    lambda seed, h, w: np.random.default_rng(seed).uniform(-1, 1, size=(h, w)),
    st.integers(0, 2**32 - 1), st.integers(8, 20), st.integers(8, 20),
)


@settings(max_examples=60, deadline=None)
@given(images, st.floats(-400, 400), st.floats(-40, 40), st.floats(-40, 40), st.floats(0.5, 2.0),
       st.sampled_from([NEAREST, BILINEAR]))
def test_dimension_and_range_preserved(px, deg, dx, dy, ratio, interp):
    x = Slice2D(px)
    for out in (rotate(x, deg, interp), translate(x, dx, dy, interp), rescale(x, ratio, interp),
                apply_affine(x, AffineParams(deg, dx, dy, ratio), interp)):
        assert out.shape == x.shape
        assert out.pixels.min() >= -1 and out.pixels.max() <= 1


@settings(max_examples=60, deadline=None)
@given(images, st.integers(0, 3), st.integers(-10, 10), st.integers(-10, 10))
def test_exact_moves_preserve_non_fill_multiset(px, quarters, dx, dy):
    px = np.where(px < -0.9, 0.0, px)  # keep fill (-1) out of the content
    x = Slice2D(px)
    rot = rotate(x, 90 * quarters, NEAREST).pixels
    if px.shape[0] == px.shape[1]:
        assert sorted(rot[rot > -1].ravel()) == sorted(px.ravel())
    moved = translate(x, dx, dy, NEAREST).pixels
    h, w = px.shape
    kept = px[max(0, -dy):max(0, h - max(0, dy)), max(0, -dx):max(0, w - max(0, dx))]
    assert sorted(moved[moved > -1].ravel()) == sorted(kept.ravel())


@settings(max_examples=60, deadline=None)
@given(images, st.floats(-5, 5), st.floats(0.1, 5))
def test_normalize_round_trip(px, lo, width):
    x = Slice2D(px)
    a, b = (-1.0, 1.0), (lo, lo + width)
    back = normalize(normalize(x, a, b), b, a)
    assert np.max(np.abs(back.pixels - x.pixels)) <= 1e-12

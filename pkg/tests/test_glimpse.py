import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ramcxr.glimpse import (GlimpseConfig, Location, anchor_pixels, extract_batch, extract_glimpse, loc_to_pixel,
                            pixel_to_loc)
from ramcxr.tensor import DimensionError


def reference_glimpse(image, x, y, g, scale, pad):
    """Per-pixel reference: one pixel at a time, pooled in row-major order."""
    side = image.shape[0]
    row_f = (y + 1.0) / 2.0 * (side - 1)
    col_f = (x + 1.0) / 2.0 * (side - 1)
    r0, c0 = math.floor(row_f + 0.5), math.floor(col_f + 0.5)

    def pixel(r, c):
        return image[r, c] if 0 <= r < side and 0 <= c < side else pad

    fine = np.empty((g, g))
    for i in range(g):
        for j in range(g):
            fine[i, j] = pixel(r0 - g // 2 + i, c0 - g // 2 + j)
    big = g * scale
    coarse = np.empty((g, g))
    for i in range(g):
        for j in range(g):
            acc = 0.0
            for di in range(scale):
                for dj in range(scale):
                    acc += pixel(r0 - big // 2 + i * scale + di, c0 - big // 2 + j * scale + dj)
            coarse[i, j] = acc / float(scale * scale)
    return fine, coarse


def test_loc_to_pixel_examples():
    assert loc_to_pixel(Location(0.0, 0.0), 256) == (127.5, 127.5)
    assert loc_to_pixel(Location(1.0, 1.0), 256) == (255.0, 255.0)
    assert loc_to_pixel(Location(-1.0, -1.0), 256) == (0.0, 0.0)
    # x is the column, y the row
    assert loc_to_pixel(Location(1.0, -1.0), 64) == (0.0, 63.0)


@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(2, 300))
def test_pixel_to_loc_inverts(x, y, side):
    back = pixel_to_loc(*loc_to_pixel(Location(x, y), side), side)
    assert back.x == pytest.approx(x, abs=1e-12) and back.y == pytest.approx(y, abs=1e-12)


def test_anchor_rounds_half_up():
    # (0,0) on an even side lands on 7.5 -> 8
    np.testing.assert_array_equal(anchor_pixels(np.array([0.0, 0.0]), 16), [8, 8])
    np.testing.assert_array_equal(anchor_pixels(np.array([[-1.0, 1.0]]), 16), [[15, 0]])


def test_constant_image_gives_constant_patches():
    cfg = GlimpseConfig(g=6)
    gl = extract_glimpse(np.full((1, 32, 32), 0.5), Location(0.1, -0.2), cfg)
    assert np.all(gl.fine == 0.5) and np.all(gl.coarse == 0.5)
    assert gl.fine.shape == gl.coarse.shape == (1, 6, 6)


def test_center_blocks_on_small_image():
    img = np.random.default_rng(0).random((16, 16))
    gl = extract_glimpse(img[None], Location(0.0, 0.0), GlimpseConfig(g=4))
    np.testing.assert_array_equal(gl.fine[0], img[6:10, 6:10])
    block = img[4:12, 4:12]
    pooled = block.reshape(4, 2, 4, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(gl.coarse[0], pooled, rtol=0, atol=1e-15)


def test_corner_padding_covers_three_quadrants():
    img = np.ones((1, 32, 32))
    gl = extract_glimpse(img, Location(-1.0, -1.0), GlimpseConfig(g=8))
    zeros = (gl.fine[0] == 0).mean()
    assert 0.6 <= zeros <= 0.8
    assert gl.fine[0, -1, -1] == 1.0 and gl.fine[0, 0, 0] == 0.0


def test_oracle_equivalence_1000_random_and_corners():
    rng = np.random.default_rng(1)
    cfg = GlimpseConfig(g=6, scale=2, pad_value=0.0)
    corners = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
    for trial in range(1000):
        side = int(rng.integers(12, 40))
        img = rng.random((side, side))
        x, y = corners[trial] if trial < len(corners) else rng.uniform(-1, 1, size=2)
        gl = extract_glimpse(img[None], Location(float(x), float(y)), cfg)
        ref_fine, ref_coarse = reference_glimpse(img, x, y, cfg.g, cfg.scale, cfg.pad_value)
        assert np.array_equal(gl.fine[0], ref_fine), (trial, x, y)
        assert np.array_equal(gl.coarse[0], ref_coarse), (trial, x, y)


def test_batch_equals_single():
    rng = np.random.default_rng(2)
    imgs = rng.random((5, 24, 24))
    locs = rng.uniform(-1, 1, size=(5, 2))
    cfg = GlimpseConfig(g=4, pad_value=0.25)
    fine, coarse = extract_batch(imgs, locs, cfg)
    for i in range(5):
        gl = extract_glimpse(imgs[i][None], Location(*locs[i]), cfg)
        assert np.array_equal(fine[i], gl.fine[0]) and np.array_equal(coarse[i], gl.coarse[0])


def test_translation_consistency():
    rng = np.random.default_rng(3)
    side, shift = 48, 5
    img = rng.random((side, side))
    moved = np.zeros_like(img)
    moved[shift:, shift:] = img[:-shift, :-shift]
    cfg = GlimpseConfig(g=6)
    r, c = 20, 22
    a = extract_glimpse(img[None], pixel_to_loc(r, c, side), cfg)
    b = extract_glimpse(moved[None], pixel_to_loc(r + shift, c + shift, side), cfg)
    assert np.array_equal(a.fine, b.fine) and np.array_equal(a.coarse, b.coarse)


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_any_clamped_location_is_extractable_and_in_range(x, y):
    img = np.random.default_rng(4).random((1, 20, 20))
    gl = extract_glimpse(img, Location(x, y), GlimpseConfig(g=4))
    assert -1.0 <= gl.center.x <= 1.0 and -1.0 <= gl.center.y <= 1.0
    assert gl.fine.min() >= 0.0 and gl.coarse.max() <= 1.0


def test_dimension_errors():
    cfg = GlimpseConfig(g=4)
    with pytest.raises(DimensionError):
        extract_glimpse(np.zeros((1, 16, 20)), Location(0, 0), cfg)
    with pytest.raises(DimensionError):
        extract_glimpse(np.zeros((3, 16, 16)), Location(0, 0), cfg)
    with pytest.raises(DimensionError):
        extract_glimpse(np.zeros((1, 6, 6)), Location(0, 0), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        GlimpseConfig(g=1)

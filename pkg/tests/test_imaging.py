import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmfuse.imaging import (YCbCrImage, as_color, as_gray, local_std, luma, patch_grid, read_png,
                            rgb_to_ycbcr, sobel_gradient, write_png, ycbcr_to_rgb)

unit = st.floats(0.0, 1.0, allow_nan=False)


def test_gray_validation():
    with pytest.raises(ValueError):
        as_gray(np.full((8, 8), 1.5))
    with pytest.raises(ValueError):
        as_gray(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        as_gray(np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        as_color(np.zeros((8, 8)))


def test_ycbcr_primaries():
    img = np.array([[[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [1.0, 1.0, 1.0]]])
    y, cb, cr = rgb_to_ycbcr(img)
    np.testing.assert_allclose(y[0], [0.299, 0.587, 0.114, 1.0], atol=1e-12)
    np.testing.assert_allclose(cb[0, 3], 0.5, atol=1e-12)
    np.testing.assert_allclose(cr[0, 3], 0.5, atol=1e-12)
    np.testing.assert_allclose(cb[0, 2], 1.0, atol=1e-12)
    np.testing.assert_allclose(cr[0, 0], 1.0, atol=1e-12)


def test_gray_color_has_neutral_chroma():
    g = np.random.default_rng(0).random((9, 9))
    y, cb, cr = rgb_to_ycbcr(np.stack([g, g, g], -1))
    np.testing.assert_allclose(y, g, atol=1e-12)
    np.testing.assert_allclose(cb, 0.5, atol=1e-12)
    np.testing.assert_allclose(cr, 0.5, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 5, 3), elements=unit))
def test_ycbcr_round_trip(img):
    back = ycbcr_to_rgb(rgb_to_ycbcr(img))
    assert np.max(np.abs(back - img)) <= 1e-9


def test_luma_passes_gray_through():
    g = np.linspace(0, 1, 64).reshape(8, 8)
    assert luma(g) is not None
    np.testing.assert_array_equal(luma(g), g)


def test_sobel_constant_and_ramp():
    assert np.max(sobel_gradient(np.full((8, 8), 0.3))) < 1e-12
    ramp = np.tile(np.arange(8.0) / 10, (8, 1))
    g = sobel_gradient(ramp)
    # interior of a horizontal ramp of slope 0.1: |[-1 0 1]*[1 2 1]| -> 8 * 0.1
    np.testing.assert_allclose(g[1:-1, 1:-1], 0.8, atol=1e-12)


def test_sobel_torch_matches_numpy_and_has_finite_grad_at_flat():
    x = torch.zeros(1, 8, 8, dtype=torch.float64, requires_grad=True)
    sobel_gradient(x).sum().backward()
    assert torch.isfinite(x.grad).all()
    arr = np.random.default_rng(1).random((10, 7))
    np.testing.assert_allclose(sobel_gradient(torch.from_numpy(arr)).numpy(), sobel_gradient(arr), atol=1e-12)


def test_local_std_brute_force():
    img = np.random.default_rng(2).random((20, 20))
    got = local_std(img, 4, 3)
    corners = patch_grid(20, 20, 4, 3)
    expect = [img[r:r + 4, c:c + 4].std() for r, c in corners]
    np.testing.assert_allclose(got.ravel(), expect, atol=1e-12)
    assert len(corners) == 36


def test_patch_grid_rejects_oversize():
    with pytest.raises(ValueError):
        patch_grid(8, 8, 9, 1)


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    g = rng.random((16, 16))
    c = rng.random((16, 16, 3))
    write_png(tmp_path / "g.png", g)
    write_png(tmp_path / "c.png", c)
    g2, c2 = read_png(tmp_path / "g.png"), read_png(tmp_path / "c.png")
    assert g2.shape == (16, 16) and c2.shape == (16, 16, 3)
    assert np.max(np.abs(g2 - g)) <= 0.5 / 255 + 1e-12
    assert np.max(np.abs(c2 - c)) <= 0.5 / 255 + 1e-12


def test_ycbcr_shape_mismatch():
    with pytest.raises(ValueError):
        ycbcr_to_rgb(YCbCrImage(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 5))))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 8, 8), elements=st.floats(0, 1)))
def test_out_of_gamut_chroma_keeps_luma(planes):
    y, cb, cr = planes
    rgb = ycbcr_to_rgb(YCbCrImage(y, cb, cr))
    assert rgb.min() >= 0 and rgb.max() <= 1
    np.testing.assert_allclose(rgb_to_ycbcr(rgb).y, y, atol=1e-12)

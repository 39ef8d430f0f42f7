import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mothtrap.imageio import Image, ImageFormatError, decode_pnm, encode_pnm, read_image, write_image
from mothtrap.vision import canny, color_correct, edge_density, gaussian_blur, gaussian_kernel, sobel, to_grayscale


def gray(arr):
    return Image(np.asarray(arr, dtype=np.uint8))


# -- PNM ---------------------------------------------------------------------

@settings(max_examples=25)
@given(h=st.integers(1, 12), w=st.integers(1, 12), rgb=st.booleans(), seed=st.integers(0, 1000))
def test_pnm_roundtrip(h, w, rgb, seed):
    shape = (h, w, 3) if rgb else (h, w)
    img = Image(np.random.default_rng(seed).integers(0, 256, shape, dtype=np.uint8))
    data = encode_pnm(img)
    assert data.startswith(b"P6" if rgb else b"P5")
    assert decode_pnm(data) == img


def test_pnm_comments_and_errors(tmp_path):
    img = decode_pnm(b"P5\n# a comment\n2 1\n# another\n255\n\x01\x02")
    assert img.pixels.tolist() == [[1, 2]]
    with pytest.raises(ImageFormatError):
        decode_pnm(b"P2\n1 1\n255\n0")
    with pytest.raises(ImageFormatError):
        decode_pnm(b"P5\n2 2\n255\n\x00")
    with pytest.raises(ImageFormatError):
        decode_pnm(b"P5\n1 1\n65535\n\x00\x00")
    p = tmp_path / "x.ppm"
    write_image(Image(np.zeros((2, 3, 3), np.uint8)), p)
    assert read_image(p).channels == 3


def test_image_is_immutable():
    img = gray([[1, 2]])
    with pytest.raises(ValueError):
        img.pixels[0, 0] = 5
    with pytest.raises(ImageFormatError):
        Image(np.zeros((2, 2), np.float32))


# -- colour correction ---------------------------------------------------------

def test_uniform_gray_unchanged():
    img = Image(np.full((4, 4, 3), 128, np.uint8))
    assert color_correct(img) == img


def test_contrast_stretch():
    img = gray(np.linspace(50, 150, 16).reshape(4, 4).round())
    out = color_correct(img)
    assert out.pixels.min() == 0 and out.pixels.max() == 255


def test_gray_world_removes_red_cast():
    rng = np.random.default_rng(0)
    base = rng.integers(40, 160, (20, 20)).astype(np.float64)
    cast = np.stack([np.minimum(base * 1.5, 255), base * 0.8, base * 0.7], axis=-1).round().astype(np.uint8)
    out = color_correct(Image(cast)).pixels.reshape(-1, 3).astype(np.float64)
    means = out.mean(axis=0)
    assert means.max() - means.min() <= 1.0


def test_grayscale_weights():
    img = Image(np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]]], np.uint8))
    assert to_grayscale(img).pixels.tolist() == [[76, 150, 29]]


# -- blur ---------------------------------------------------------------------

def test_blur_constant_and_impulse():
    assert gaussian_blur(gray(np.full((9, 9), 77))) == gray(np.full((9, 9), 77))
    imp = np.zeros((9, 9)) ; imp[4, 4] = 200
    out = gaussian_blur(gray(imp)).pixels.astype(np.float64)
    k = gaussian_kernel()
    np.testing.assert_allclose(out[2:7, 2:7], np.rint(200 * np.outer(k, k)), atol=1)
    with pytest.raises(ValueError):
        gaussian_kernel(0)


def test_blur_preserves_interior_intensity():
    rng = np.random.default_rng(1)
    px = np.zeros((40, 40)); px[10:30, 10:30] = rng.integers(0, 256, (20, 20))
    out = gaussian_blur(gray(px)).pixels.astype(np.float64)
    assert abs(out.sum() - px.sum()) / px.sum() < 0.005


# -- Canny -------------------------------------------------------------------

def test_canny_constant_is_empty():
    assert not canny(gray(np.full((10, 10), 90))).pixels.any()


def test_canny_vertical_step_one_pixel_wide():
    px = np.zeros((12, 12)); px[:, 6:] = 200
    e = canny(gray(px)).pixels
    assert set(np.unique(e)) == {0, 255}
    cols = np.flatnonzero(e.any(axis=0))
    assert len(cols) == 1 and cols[0] in (5, 6)
    assert e[:, cols[0]].all()


def test_canny_weak_gradients_below_low():
    px = np.tile(np.arange(12) * 2, (12, 1))  # Sobel magnitude 16 < 50
    assert not canny(gray(px)).pixels.any()


def test_canny_threshold_validation():
    img = gray(np.zeros((4, 4)))
    for lo, hi in ((0, 100), (100, 50), (50, 300)):
        with pytest.raises(ValueError):
            canny(img, lo, hi)


def test_canny_hysteresis_keeps_connected_weak_edges():
    # one step edge: strong in the top rows, weak (Sobel 120) below
    px = np.zeros((15, 15)); px[:, 7:] = 30; px[:5, 7:] = 200
    strong_only = canny(gray(px), low=140, high=150).pixels
    linked = canny(gray(px), low=50, high=150).pixels
    assert np.count_nonzero(linked) > np.count_nonzero(strong_only)
    assert linked[14].any()
    # the same weak edge on its own never reaches the high threshold
    alone = np.zeros((15, 15)); alone[:, 7:] = 30
    assert not canny(gray(alone), low=50, high=150).pixels.any()


def test_sobel_and_density():
    px = np.zeros((5, 5)); px[:, 3:] = 10
    gx, gy = sobel(px)
    assert gx[2, 2] == 40 and not gy.any()
    assert edge_density(gray(np.array([[0, 255], [0, 0]]))) == 0.25

"""Classical preprocessing: colour correction, Gaussian smoothing, Canny edges."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .imageio import Image

LUMA = np.array([0.299, 0.587, 0.114])


def to_grayscale(img: Image) -> Image:
    if img.channels == 1:
        return img
    return Image(np.clip(np.rint(img.pixels.astype(np.float64) @ LUMA), 0, 255).astype(np.uint8))


def color_correct(img: Image) -> Image:
    """Gray-world white balance, then a linear stretch of the whole frame to 0..255.

    Works in floating point and rounds once at the end, so balanced channel
    means stay within one LSB of each other.  A flat image is returned as is.
    """
    px = img.pixels.astype(np.float64)
    if img.channels == 3:
        means = px.reshape(-1, 3).mean(axis=0)
        gray = means.mean()
        gains = np.where(means > 0, gray / np.where(means > 0, means, 1), 1.0)
        px = px * gains
    lo, hi = px.min(), px.max()
    if hi - lo < 1e-9:
        return Image(np.clip(np.rint(px), 0, 255).astype(np.uint8))
    px = (px - lo) * (255.0 / (hi - lo))
    return Image(np.clip(np.rint(px), 0, 255).astype(np.uint8))


def gaussian_kernel(sigma: float = 1.4, size: int = 5) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = size // 2
    k = np.exp(-(np.arange(-r, r + 1) ** 2) / (2 * sigma * sigma))
    return k / k.sum()


def _smooth(arr: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = len(k) // 2
    out = arr
    for axis in (0, 1):
        pad = [(0, 0)] * arr.ndim
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            acc += kv * np.take(p, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def gaussian_blur(img: Image, sigma: float = 1.4, size: int = 5) -> Image:
    """Separable normalized Gaussian; borders replicate the edge pixel."""
    k = gaussian_kernel(sigma, size)
    out = _smooth(img.pixels.astype(np.float64), k)
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))


SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical Sobel responses with replicated borders."""
    p = np.pad(gray.astype(np.float64), 1, mode="edge")
    h, w = gray.shape
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            win = p[i:i + h, j:j + w]
            gx += SOBEL_X[i, j] * win
            gy += SOBEL_X[j, i] * win
    return gx, gy


def canny(img: Image, low: float = 50, high: float = 150) -> Image:
    """Binary edge map (0/255): Sobel gradients, non-maximum suppression along
    the quantized gradient direction, then double-threshold hysteresis."""
    if img.channels != 1:
        raise ValueError("canny expects a grayscale image")
    if not 0 < low < high <= 255:
        raise ValueError(f"need 0 < low < high <= 255, got low={low} high={high}")
    gx, gy = sobel(img.pixels)
    mag = np.hypot(gx, gy)
    angle = (np.degrees(np.arctan2(gy, gx)) + 180.0) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4  # 0:E-W 1:NE-SW 2:N-S 3:NW-SE
    # neighbour offsets (dy, dx) along the gradient for each sector
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    p = np.pad(mag, 1)
    h, w = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        back = p[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        # ties resolve toward the forward side so a symmetric ridge stays one pixel wide
        keep |= (sector == s) & (mag >= back) & (mag > fwd)
    nms = np.where(keep, mag, 0.0)
    strong = nms >= high
    weak = nms >= low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return Image(np.zeros_like(img.pixels))
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    edges = has_strong[labels]
    return Image(np.where(edges, 255, 0).astype(np.uint8))


def edge_density(edges: Image) -> float:
    return float(np.mean(edges.pixels > 0))

"""Two-class tile datasets: a seeded synthetic generator, augmentation, and
PGM directory storage (``<root>/codling_moth/*.pgm``, ``<root>/general_insect/*.pgm``).

The synthetic renderer stands in for real trap photographs.  A codling moth is
an elongated dark ellipse with banded wing texture and a lighter patch near the
wing tips; a general insect is a cluster of two to four rounder blobs with
thin legs.  Both sit on a light, slightly shaded sticky-board background with
additive noise.  Tiles and full trap scenes use the same renderer, so a
classifier trained on tiles transfers to sliding windows over scenes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imageio import Image, read_image, write_image

CLASSES = ("codling_moth", "general_insect")
MOTH, INSECT = CLASSES
TILE = 52


@dataclass(frozen=True, eq=False)
class LabeledTile:
    image: np.ndarray  # (52, 52) float32 in [0, 1]
    label: str

    def __post_init__(self):
        if self.label not in CLASSES:
            raise ValueError(f"label must be one of {CLASSES}, got {self.label!r}")
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 2:
            raise ValueError(f"tile must be a 2-D grayscale array, got {img.shape}")
        object.__setattr__(self, "image", img)

    @property
    def target(self) -> int:
        return CLASSES.index(self.label)


@dataclass
class DatasetSplit:
    train: list[LabeledTile]
    test: list[LabeledTile]
    ratios: tuple[float, float] = field(default=(0.0, 0.0))

    def __post_init__(self):
        n = len(self.train) + len(self.test)
        if n and self.ratios == (0.0, 0.0):
            self.ratios = (len(self.train) / n, len(self.test) / n)

    def counts(self) -> dict[str, dict[str, int]]:
        return {part: class_counts(tiles) for part, tiles in (("train", self.train), ("test", self.test))}


def class_counts(tiles) -> dict[str, int]:
    return {c: sum(t.label == c for t in tiles) for c in CLASSES}


def to_arrays(tiles) -> tuple[np.ndarray, np.ndarray]:
    """Stack tiles into ``X`` [N,1,H,W] float32 and integer targets (0 = codling moth)."""
    x = np.stack([t.image for t in tiles])[:, None].astype(np.float32)
    y = np.array([t.target for t in tiles], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# rendering

BACKGROUND = 0.80
NOISE = 0.045


def background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Light sticky-board surface with a gentle illumination gradient."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    level = BACKGROUND + rng.uniform(-0.04, 0.04)
    gy, gx = rng.uniform(-0.04, 0.04, size=2) / max(h, w)
    return (level + gy * (yy - h / 2) + gx * (xx - w / 2)).astype(np.float32)


def _ellipse_alpha(yy, xx, cy, cx, a, b, theta, soft=0.8):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    # soft edge about `soft` pixels wide
    return np.clip((1.0 - r) * min(a, b) / soft + 0.5, 0.0, 1.0), u, v


def _blend(canvas, alpha, value):
    canvas *= 1.0 - alpha
    canvas += alpha * value


def render_moth(canvas: np.ndarray, cy: float, cx: float, rng: np.random.Generator) -> None:
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    a = rng.uniform(11.0, 14.0)
    b = a / rng.uniform(2.2, 2.8)
    theta = rng.uniform(0, math.pi)
    dark = rng.uniform(0.18, 0.30)
    alpha, u, v = _ellipse_alpha(yy, xx, cy, cx, a, b, theta)
    period = rng.uniform(3.0, 4.0)
    texture = 0.05 * np.sin(2 * math.pi * u / period + rng.uniform(0, 2 * math.pi))
    tip = 1.0 if rng.random() < 0.5 else -1.0
    patch = 0.12 * np.exp(-(((u - tip * 0.62 * a) / (0.22 * a)) ** 2 + (v / (0.8 * b)) ** 2))
    _blend(canvas, alpha, dark + texture + patch)
    # head at the opposite end
    head, _, _ = _ellipse_alpha(yy, xx, cy - tip * 0.95 * a * math.sin(theta),
                                cx - tip * 0.95 * a * math.cos(theta), 0.3 * b + 1.0, 0.3 * b + 1.0, 0.0)
    _blend(canvas, head, dark * 0.8)


def render_insect(canvas: np.ndarray, cy: float, cx: float, rng: np.random.Generator) -> None:
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    dark = rng.uniform(0.10, 0.45)
    # legs
    for _ in range(rng.integers(2, 5)):
        ang = rng.uniform(0, 2 * math.pi)
        length = rng.uniform(8, 14)
        alpha, _, _ = _ellipse_alpha(yy, xx, cy + 0.5 * length * math.sin(ang),
                                     cx + 0.5 * length * math.cos(ang), 0.5 * length, 0.7, ang, soft=0.6)
        _blend(canvas, alpha * 0.6, dark)
    for i in range(rng.integers(2, 5)):
        r = rng.uniform(3.5, 7.5)
        off = rng.uniform(0, 6.0) if i else 0.0
        ang = rng.uniform(0, 2 * math.pi)
        alpha, _, _ = _ellipse_alpha(yy, xx, cy + off * math.sin(ang), cx + off * math.cos(ang),
                                     r, r / rng.uniform(1.0, 1.6), rng.uniform(0, math.pi))
        _blend(canvas, alpha, dark + rng.uniform(-0.05, 0.15))


def _finish(canvas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    canvas = canvas + rng.normal(0.0, NOISE, canvas.shape)
    # 8-bit quantization, as a camera would deliver
    return np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.float32) / 255.0


def synthetic_tile(label: str, rng: np.random.Generator, size: int = TILE, jitter: float = 10.0) -> LabeledTile:
    canvas = background(size, size, rng)
    cy, cx = size / 2 - 0.5 + rng.uniform(-jitter, jitter, size=2)
    (render_moth if label == MOTH else render_insect)(canvas, cy, cx, rng)
    # mild global contrast change, covering the full-frame stretch of color correction
    lo, hi = rng.uniform(-0.08, 0.0), rng.uniform(1.0, 1.08)
    canvas = (canvas - lo) / (hi - lo)
    return LabeledTile(_finish(canvas, rng), label)


def synthetic_tiles(n: int, seed: int = 0, moth_fraction: float = 0.5, size: int = TILE,
                    jitter: float = 10.0) -> list[LabeledTile]:
    """``n`` tiles, the first ``round(n * moth_fraction)`` moths, then shuffled."""
    rng = np.random.default_rng(seed)
    n_moth = int(round(n * moth_fraction))
    labels = [MOTH] * n_moth + [INSECT] * (n - n_moth)
    rng.shuffle(labels)
    return [synthetic_tile(lab, rng, size, jitter) for lab in labels]


def synthetic_benchmark(n_train: int = 2000, n_test: int = 500, seed: int = 0,
                        moth_fraction: float = 0.5) -> DatasetSplit:
    """Disjoint train/test tile sets drawn from independent random streams."""
    train_seed, test_seed = np.random.SeedSequence(seed).spawn(2)
    return DatasetSplit(
        synthetic_tiles(n_train, np.random.default_rng(train_seed).integers(2**63), moth_fraction),
        synthetic_tiles(n_test, np.random.default_rng(test_seed).integers(2**63), moth_fraction),
    )


@dataclass(frozen=True)
class PlantedInsect:
    x: float  # centre column
    y: float  # centre row
    label: str


def synthetic_scene(width: int = 520, height: int = 520, n_moths: int = 5, n_others: int = 3,
                    seed: int = 0, min_gap: float = 60.0, margin: int = 20,
                    tint: tuple[float, float, float] | None = None) -> tuple[Image, list[PlantedInsect]]:
    """A trap photograph with planted insects at non-overlapping positions.

    Returns the image (grayscale, or RGB when ``tint`` gives per-channel gains)
    and the planted ground truth.
    """
    rng = np.random.default_rng(seed)
    canvas = background(height, width, rng)
    planted: list[PlantedInsect] = []
    labels = [MOTH] * n_moths + [INSECT] * n_others
    for label in labels:
        for _ in range(1000):
            x = rng.uniform(margin, width - margin)
            y = rng.uniform(margin, height - margin)
            if all(math.hypot(x - p.x, y - p.y) >= min_gap for p in planted):
                break
        else:
            raise ValueError("could not place insects; scene too crowded")
        planted.append(PlantedInsect(float(x), float(y), label))
        (render_moth if label == MOTH else render_insect)(canvas, y, x, rng)
    gray = _finish(canvas, rng)
    if tint is None:
        return Image.from_float(gray), planted
    rgb = np.stack([gray * g for g in tint], axis=-1)
    return Image.from_float(rgb), planted


# ---------------------------------------------------------------------------
# augmentation


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def vflip(img: np.ndarray) -> np.ndarray:
    return img[::-1, :].copy()


def shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    return ndimage.shift(img, (dy, dx), order=0, mode="nearest")


def rotate_zoom(img: np.ndarray, degrees: float, zoom: float) -> np.ndarray:
    """Rotate about the centre and scale by ``zoom``; output keeps the input size."""
    h, w = img.shape
    t = math.radians(degrees)
    # output->input mapping: rotate by -t and scale by 1/zoom
    m = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]]) / zoom
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - m @ centre
    return ndimage.affine_transform(img, m, offset=offset, order=1, mode="nearest").astype(np.float32)


def random_transform(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = shift(img, *rng.integers(-4, 5, size=2))
    if rng.random() < 0.5:
        out = hflip(out)
    if rng.random() < 0.5:
        out = vflip(out)
    out = np.rot90(out, k=int(rng.integers(0, 4))).copy()
    out = rotate_zoom(out, rng.uniform(-15, 15), rng.uniform(0.9, 1.1))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(tiles: list[LabeledTile], factor: int, seed: int = 0) -> list[LabeledTile]:
    """Originals followed by ``factor - 1`` randomly transformed copies of each.

    Transforms: shift up to 4 px, horizontal/vertical flips, quarter turns,
    a further rotation within 15 degrees, zoom 0.9-1.1.  Labels and tile size
    are unchanged.
    """
    if factor < 1:
        raise ValueError("augmentation factor must be >= 1")
    rng = np.random.default_rng(seed)
    out = list(tiles)
    for _ in range(factor - 1):
        out.extend(LabeledTile(random_transform(t.image, rng), t.label) for t in tiles)
    return out


def split(tiles: list[LabeledTile], test_fraction: float = 0.2, seed: int = 0) -> DatasetSplit:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    idx = np.random.default_rng(seed).permutation(len(tiles))
    n_test = int(round(len(tiles) * test_fraction))
    test = [tiles[i] for i in idx[:n_test]]
    train = [tiles[i] for i in idx[n_test:]]
    return DatasetSplit(train, test)


# ---------------------------------------------------------------------------
# storage


def save_tiles(tiles: list[LabeledTile], root) -> None:
    root = Path(root)
    for c in CLASSES:
        (root / c).mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(tiles):
        write_image(Image.from_float(t.image), root / t.label / f"{i:06d}.pgm")


def load_tiles(root) -> list[LabeledTile]:
    root = Path(root)
    tiles = []
    found = False
    for c in CLASSES:
        d = root / c
        if not d.is_dir():
            continue
        found = True
        for p in sorted(d.glob("*.pgm")):
            img = read_image(p)
            if img.channels != 1:
                raise ValueError(f"{p}: dataset tiles must be grayscale PGM")
            tiles.append(LabeledTile(img.to_float(), c))
    if not found:
        raise FileNotFoundError(f"{root} has neither {CLASSES[0]}/ nor {CLASSES[1]}/")
    return tiles


def save_split(ds: DatasetSplit, root) -> None:
    save_tiles(ds.train, Path(root) / "train")
    save_tiles(ds.test, Path(root) / "test")


def load_split(root, test_fraction: float = 0.2, seed: int = 0) -> DatasetSplit:
    """Load ``root/train`` + ``root/test`` if present, else split ``root`` itself."""
    root = Path(root)
    if (root / "train").is_dir() and (root / "test").is_dir():
        return DatasetSplit(load_tiles(root / "train"), load_tiles(root / "test"))
    return split(load_tiles(root), test_fraction, seed)

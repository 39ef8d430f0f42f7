"""Sliding-window detection: ROI proposal, classification, non-maximum
suppression, thresholding, annotation and CSV export.

``detect`` runs the whole chain::

    color_correct -> grayscale -> gaussian_blur -> canny
        -> extract_rois (edge-density gate) -> classify_rois -> nms -> threshold

A classifier is either a :class:`~mothtrap.graph.ModelGraph` (class 0 of its
softmax is codling moth) or any callable mapping a float32 batch
``[N, 1, S, S]`` in [0, 1] to ``N`` moth probabilities.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Union

import numpy as np

from . import graph as G
from .data import CLASSES, MOTH, INSECT
from .imageio import Image
from .vision import canny, color_correct, gaussian_blur, to_grayscale

UNSET = -1.0
RED = (255, 0, 0)
BLUE = (0, 0, 255)

Classifier = Union[G.ModelGraph, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class RoiCandidate:
    x: int
    y: int
    size: int
    probability: float = UNSET

    @property
    def centre(self) -> tuple[float, float]:
        return self.x + self.size / 2, self.y + self.size / 2


@dataclass(frozen=True)
class Detection:
    x: int
    y: int
    size: int
    probability: float
    label: str

    @property
    def centre(self) -> tuple[float, float]:
        return self.x + self.size / 2, self.y + self.size / 2


def _integral(mask: np.ndarray) -> np.ndarray:
    s = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    s[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0), axis=1)
    return s


def window_positions(width: int, height: int, window: int, stride: int):
    return [(x, y) for y in range(0, height - window + 1, stride) for x in range(0, width - window + 1, stride)]


def extract_rois(img: Image, edges: Image, window: int = 52, stride: int = 26,
                 min_edge_density: float | None = 0.02) -> list[RoiCandidate]:
    """Dense grid of windows (raster order), dropping those whose fraction of
    edge pixels is below ``min_edge_density``.  ``None`` or 0 disables the gate."""
    if window > min(img.width, img.height):
        raise ValueError(f"window {window} larger than image {img.width}x{img.height}")
    if stride < 1:
        raise ValueError("stride must be positive")
    if (edges.width, edges.height) != (img.width, img.height):
        raise ValueError("edge map and image sizes differ")
    sat = _integral(edges.pixels > 0)
    area = window * window
    out = []
    for x, y in window_positions(img.width, img.height, window, stride):
        if min_edge_density:
            n = sat[y + window, x + window] - sat[y, x + window] - sat[y + window, x] + sat[y, x]
            if n / area < min_edge_density:
                continue
        out.append(RoiCandidate(x, y, window))
    return out


def _crops(gray: np.ndarray, candidates) -> np.ndarray:
    return np.stack([gray[c.y:c.y + c.size, c.x:c.x + c.size] for c in candidates])[:, None].astype(np.float32) / 255.0


def _scorer(model: Classifier) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, G.ModelGraph):
        idx = CLASSES.index(MOTH)
        return lambda batch: G.run(model, batch).output[:, idx]
    return model


def classify_rois(candidates: list[RoiCandidate], img: Image, model: Classifier, chunk: int = 128,
                  workers: int = 1) -> list[RoiCandidate]:
    """Score every candidate window; output order matches input order.

    Chunks of ``chunk`` windows may be scored on ``workers`` threads; the
    chunking is fixed, so results do not depend on scheduling.
    """
    if not candidates:
        return []
    gray = to_grayscale(img).pixels
    if isinstance(model, G.ModelGraph):
        size = candidates[0].size
        if model.input_shape != (1, size, size):
            raise ValueError(f"model input {list(model.input_shape)} does not match window {size}")
    score = _scorer(model)
    chunks = [candidates[i:i + chunk] for i in range(0, len(candidates), chunk)]

    def run_chunk(cs):
        return np.asarray(score(_crops(gray, cs)), dtype=np.float64).reshape(-1)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            probs = list(pool.map(run_chunk, chunks))
    else:
        probs = [run_chunk(cs) for cs in chunks]
    flat = np.concatenate(probs)
    return [replace(c, probability=float(p)) for c, p in zip(candidates, flat)]


def iou(a, b) -> float:
    ix = max(0, min(a.x + a.size, b.x + b.size) - max(a.x, b.x))
    iy = max(0, min(a.y + a.size, b.y + b.size) - max(a.y, b.y))
    inter = ix * iy
    union = a.size * a.size + b.size * b.size - inter
    return inter / union if union else 0.0


def nms(candidates: list[RoiCandidate], overlap_threshold: float = 0.3, mode: str = "iou") -> list[RoiCandidate]:
    """Greedy non-maximum suppression, highest probability first.

    Ties are visited in raster order (top-left first).  ``mode="iou"``
    suppresses a window whose IoU with a kept one exceeds the threshold;
    ``mode="grid"`` suppresses any window that overlaps a kept one at all.
    The result is returned in the visiting order.
    """
    if mode not in ("iou", "grid"):
        raise ValueError(f"nms mode must be 'iou' or 'grid', got {mode!r}")
    for c in candidates:
        if not 0.0 <= c.probability <= 1.0:
            raise ValueError(f"candidate at ({c.x},{c.y}) has no probability set")
    limit = 0.0 if mode == "grid" else overlap_threshold
    order = sorted(candidates, key=lambda c: (-c.probability, c.y, c.x))
    kept: list[RoiCandidate] = []
    for c in order:
        if all(iou(c, k) <= limit for k in kept):
            kept.append(c)
    return kept


@dataclass(frozen=True)
class PipelineParams:
    window: int = 52
    stride: int = 26
    min_edge_density: float | None = 0.02
    gate: str = "first"  # or "after": classify every window, gate afterwards
    sigma: float = 1.4
    canny_low: float = 50
    canny_high: float = 150
    overlap_threshold: float = 0.3
    nms_mode: str = "iou"


def detect(img: Image, model: Classifier, threshold: float = 0.5, params: PipelineParams = PipelineParams(),
           workers: int = 1) -> tuple[list[Detection], Image]:
    """Full pipeline on one trap image.

    NMS survivors with probability >= ``threshold`` are codling moths (red
    boxes); the remaining survivors are general insects (blue boxes).
    """
    if params.gate not in ("first", "after"):
        raise ValueError("gate must be 'first' or 'after'")
    gray, edges = preprocess(img, params)
    if params.gate == "first":
        cands = extract_rois(gray, edges, params.window, params.stride, params.min_edge_density)
        scored = classify_rois(cands, gray, model, workers=workers)
    else:
        allc = extract_rois(gray, edges, params.window, params.stride, None)
        keep = {(c.x, c.y) for c in extract_rois(gray, edges, params.window, params.stride, params.min_edge_density)}
        scored = [c for c in classify_rois(allc, gray, model, workers=workers) if (c.x, c.y) in keep]
    dets = finalize(scored, threshold, params)
    return dets, annotate(img, dets)


def preprocess(img: Image, params: PipelineParams = PipelineParams()) -> tuple[Image, Image]:
    """Colour correction, grayscale and Canny edges: ``(gray, edges)``."""
    gray = to_grayscale(color_correct(img))
    edges = canny(gaussian_blur(gray, params.sigma), params.canny_low, params.canny_high)
    return gray, edges


def finalize(scored: list[RoiCandidate], threshold: float = 0.5,
             params: PipelineParams = PipelineParams()) -> list[Detection]:
    """NMS over scored candidates, then label each survivor by ``threshold``."""
    survivors = nms(scored, params.overlap_threshold, params.nms_mode)
    return [Detection(c.x, c.y, c.size, c.probability, MOTH if c.probability >= threshold else INSECT)
            for c in survivors]


def annotate(img: Image, detections: list[Detection], thickness: int = 2) -> Image:
    """RGB copy of ``img`` with box outlines: red for moths, blue for other insects."""
    px = img.pixels if img.channels == 3 else np.repeat(img.pixels[..., None], 3, axis=2)
    px = px.copy()
    for d in sorted(detections, key=lambda d: d.label == MOTH):
        colour = RED if d.label == MOTH else BLUE
        x0, y0, x1, y1 = d.x, d.y, d.x + d.size, d.y + d.size
        px[y0:y0 + thickness, x0:x1] = colour
        px[y1 - thickness:y1, x0:x1] = colour
        px[y0:y1, x0:x0 + thickness] = colour
        px[y0:y1, x1 - thickness:x1] = colour
    return Image(px)


def box_mask(shape: tuple[int, int], detections: list[Detection], thickness: int = 2) -> np.ndarray:
    """Boolean mask of the pixels covered by :func:`annotate` outlines."""
    m = np.zeros(shape, dtype=bool)
    for d in detections:
        x0, y0, x1, y1 = d.x, d.y, d.x + d.size, d.y + d.size
        m[y0:y0 + thickness, x0:x1] = m[y1 - thickness:y1, x0:x1] = True
        m[y0:y1, x0:x0 + thickness] = m[y0:y1, x1 - thickness:x1] = True
    return m


def write_detections_csv(detections: list[Detection], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "size", "probability", "class"])
        for d in detections:
            w.writerow([d.x, d.y, d.size, f"{d.probability:.6f}", d.label])


def read_detections_csv(path) -> list[Detection]:
    with open(path, newline="") as fh:
        return [Detection(int(r["x"]), int(r["y"]), int(r["size"]), float(r["probability"]), r["class"])
                for r in csv.DictReader(fh)]


def count_labels(detections) -> tuple[int, int]:
    moths = sum(d.label == MOTH for d in detections)
    return moths, len(detections) - moths


def match_planted(detections, planted, tolerance: float | None = None, label: str = MOTH) -> int:
    """How many planted insects of ``label`` have a ``label`` detection whose
    centre lies within ``tolerance`` (default half a window) on both axes."""
    found = 0
    dets = [d for d in detections if d.label == label]
    for p in planted:
        if p.label != label:
            continue
        for d in dets:
            tol = d.size / 2 if tolerance is None else tolerance
            cx, cy = d.centre
            if abs(cx - p.x) <= tol and abs(cy - p.y) <= tol:
                found += 1
                break
    return found

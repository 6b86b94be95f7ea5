"""SLIC superpixels and LIME surrogate explanations over them."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage
from sklearn.linear_model import Ridge

from .model import Sequential, as_batch
from .songgen import rng_for
from .xai import EPS, SaliencyMap, fill_value_of, normalize_minmax

logger = logging.getLogger(__name__)

INTENSITY_SCALE = 100.0  # puts [0, 1] intensities on a Lab-like 0..100 range
_FOUR = ndimage.generate_binary_structure(2, 1)


class UnderdeterminedWarning(UserWarning):
    """Fewer perturbations than superpixels."""


@dataclass
class SegmentMask:
    labels: np.ndarray
    k: int
    compactness: float = 10.0
    iterations: int = 10

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.k)


def _grid_centers(h: int, w: int, k: int):
    step = np.sqrt(h * w / k)
    ny = max(1, min(h, int(round(h / step))))
    nx = max(1, min(w, int(round(w / step))))
    cy = (np.arange(ny) + 0.5) * h / ny
    cx = (np.arange(nx) + 0.5) * w / nx
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    return yy.ravel(), xx.ravel()


def _relabel(labels: np.ndarray) -> np.ndarray:
    """Renumber ids to 0..n-1 in raster order of first appearance."""
    _, first, inv = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first)] = np.arange(first.size)
    return rank[inv].reshape(labels.shape)


def _enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Give every 4-connected piece its own id, then merge orphan pieces
    (all but the largest piece of a label) and pieces smaller than
    ``min_size`` into their largest neighbour."""
    comp = np.zeros(labels.shape, dtype=np.int64)
    keep = set()
    next_id = 0
    for lab in np.unique(labels):
        pieces, n = ndimage.label(labels == lab, structure=_FOUR)
        sizes = np.bincount(pieces.ravel(), minlength=n + 1)[1:]
        sel = pieces > 0
        comp[sel] = pieces[sel] - 1 + next_id
        keep.add(next_id + int(np.argmax(sizes)))
        next_id += n
    sizes = np.bincount(comp.ravel(), minlength=next_id)
    alive = sizes > 0
    for cid in np.argsort(sizes, kind="stable"):
        if not alive[cid] or (cid in keep and sizes[cid] >= min_size):
            continue
        if alive.sum() == 1:
            break
        mask = comp == cid
        ring = ndimage.binary_dilation(mask, structure=_FOUR) & ~mask
        neighbours = np.unique(comp[ring])
        if neighbours.size == 0:
            continue
        target = int(neighbours[np.argmax(sizes[neighbours])])
        comp[mask] = target
        sizes[target] += sizes[cid]
        sizes[cid] = 0
        alive[cid] = False
    return _relabel(comp)


def slic_segment(img, k: int = 100, compactness: float = 10.0, iterations: int = 10, intensity_scale: float = INTENSITY_SCALE) -> SegmentMask:
    """SLIC over (intensity * scale, y, x) with grid-seeded centers."""
    pix = np.asarray(as_batch(img)[0, 0], dtype=np.float64)
    h, w = pix.shape
    if k <= 0:
        raise ValueError("k must be positive")
    if k > h * w:
        raise ValueError(f"k={k} exceeds the pixel count {h * w}")
    inten = pix * intensity_scale
    step = np.sqrt(h * w / k)
    cy, cx = _grid_centers(h, w, k)
    ci = inten[np.clip(cy.astype(int), 0, h - 1), np.clip(cx.astype(int), 0, w - 1)]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    spatial = (compactness / step) ** 2
    r = int(np.ceil(step))
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(iterations):
        dist = np.full((h, w), np.inf)
        for j in range(cy.size):
            y0, y1 = max(0, int(cy[j]) - r), min(h, int(cy[j]) + r + 1)
            x0, x1 = max(0, int(cx[j]) - r), min(w, int(cx[j]) + r + 1)
            d = (inten[y0:y1, x0:x1] - ci[j]) ** 2 + spatial * ((yy[y0:y1, x0:x1] - cy[j]) ** 2 + (xx[y0:y1, x0:x1] - cx[j]) ** 2)
            win = dist[y0:y1, x0:x1]
            better = d < win
            win[better] = d[better]
            labels[y0:y1, x0:x1][better] = j
        # pixels no window reached go to the nearest center in the plane
        orphan = ~np.isfinite(dist)
        if orphan.any():
            d2 = (yy[orphan, None] - cy) ** 2 + (xx[orphan, None] - cx) ** 2
            labels[orphan] = np.argmin(d2, axis=1)
        count = np.bincount(labels.ravel(), minlength=cy.size)
        has = count > 0
        for arr, src in ((cy, yy), (cx, xx), (ci, inten)):
            sums = np.bincount(labels.ravel(), weights=src.ravel(), minlength=cy.size)
            arr[has] = sums[has] / count[has]
    min_size = max(1, int(0.25 * h * w / k))
    final = _enforce_connectivity(labels, min_size)
    return SegmentMask(final, int(final.max()) + 1, compactness, iterations)


@dataclass
class LimeExplanation:
    weights: np.ndarray
    intercept: float
    r2: float
    top_positive: list[int]
    target_class: int
    saliency: SaliencyMap | None = None
    meta: dict = field(default_factory=dict)


def _scorer(model) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, Sequential):
        return model.predict_proba
    if callable(model):
        return model
    raise TypeError("model must be a Sequential or a callable returning class probabilities")


def perturb(x: np.ndarray, labels: np.ndarray, z: np.ndarray, fill: float) -> np.ndarray:
    """Images with superpixels switched off (z == 0) painted with ``fill``."""
    on = z[:, labels]  # [n, H, W]
    return np.where(on[:, None], x[0][None], np.float32(fill)).astype(np.float32)


def lime_explain(
    model,
    img,
    mask: SegmentMask,
    n_samples: int = 1000,
    seed: int = 0,
    target_class: int | None = None,
    fill: float | None = None,
    top: int = 5,
    ridge_alpha: float = 1.0,
    batch_size: int = 64,
    eps: float = EPS,
) -> LimeExplanation:
    """Fit a weighted ridge surrogate to class probabilities on random
    superpixel on/off patterns."""
    score = _scorer(model)
    x = as_batch(img)
    if mask.labels.shape != x.shape[-2:]:
        raise ValueError(f"segment mask {mask.labels.shape} does not match image {x.shape[-2:]}")
    k = mask.k
    if n_samples < k:
        warnings.warn(f"n_samples={n_samples} < k={k}: under-determined surrogate", UnderdeterminedWarning, stacklevel=2)
    fill = fill_value_of(img) if fill is None else float(fill)
    if target_class is None:
        target_class = int(np.argmax(score(x)[0]))
    rng = rng_for(seed, 0x11E)
    z = rng.integers(0, 2, size=(n_samples, k)).astype(np.int8)
    y = np.empty(n_samples, dtype=np.float64)
    for lo in range(0, n_samples, batch_size):
        zb = z[lo : lo + batch_size]
        y[lo : lo + len(zb)] = np.asarray(score(perturb(x, mask.labels, zb, fill)))[:, target_class]

    norms = np.sqrt(z.sum(axis=1, dtype=np.float64))
    cos = np.divide(z.sum(axis=1), norms * np.sqrt(k), out=np.zeros(n_samples), where=norms > 0)
    dist = 1.0 - cos
    sigma = 0.25 * np.sqrt(k)
    sw = np.exp(-(dist**2) / sigma**2)

    reg = Ridge(alpha=ridge_alpha).fit(z, y, sample_weight=sw)
    weights = reg.coef_.astype(np.float64)
    r2 = float(reg.score(z, y, sample_weight=sw))
    order = np.argsort(-weights, kind="stable")
    top_positive = [int(i) for i in order if weights[i] > 0][:top]
    values = normalize_minmax(np.maximum(weights, 0.0)[mask.labels], eps)
    meta = {"n_samples": n_samples, "seed": seed, "k": k, "fill": fill, "ridge_alpha": ridge_alpha}
    smap = SaliencyMap(values, "lime", target_class, eps, {**meta, "r2": r2, "top_positive": top_positive})
    return LimeExplanation(weights, float(reg.intercept_), r2, top_positive, target_class, smap, meta)

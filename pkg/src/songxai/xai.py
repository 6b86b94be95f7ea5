"""Gradient-based attribution: Grad-CAM, DeepLIFT (Rescale rule) and an
expected-gradients SHAP estimator, plus min-max normalization and jet
overlays shared by every explainer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .dsp import SpectrogramImage, write_png
from .errors import DataError, NumericError
from .model import Sequential, as_batch
from .songgen import rng_for
from .tensor import (
    Tensor,
    backward,
    _pool_offsets,
    _scatter_offsets,
    conv2d_grad_input,
    conv2d_grad_input_nhwc,
    no_grad,
    select,
    sum_all,
)

EPS = 1e-8
METHODS = ("gradcam", "deeplift", "lime", "shap", "ensemble_avg", "ensemble_max")
RESCALE_THRESHOLD = 1e-7


@dataclass
class SaliencyMap:
    values: np.ndarray
    method: str
    target_class: int
    eps: float = EPS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown saliency method {self.method!r}")
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def normalize_minmax(h, eps: float = EPS) -> np.ndarray:
    """``(H - min H) / (max H - min H + eps)``; a constant map becomes zeros."""
    h = np.asarray(h, dtype=np.float64)
    if np.isnan(h).any():
        raise NumericError("cannot normalize a map containing NaN")
    if h.size == 0:
        return h.copy()
    lo = h.min()
    return (h - lo) / (h.max() - lo + eps)


def fill_value_of(img, default: float = 1.0) -> float:
    """Intensity of an empty (signal-free) pixel for this image."""
    if isinstance(img, SpectrogramImage):
        return img.fill_value
    return float(default)


def _check_class(model: Sequential, c: int) -> int:
    n_out = model.config.fc_sizes[-1] if model.config is not None else None
    c = int(c)
    if c < 0 or (n_out is not None and c >= n_out):
        raise ValueError(f"unknown class id {c}")
    return c


def _predicted_class(model: Sequential, x: np.ndarray) -> int:
    return int(np.argmax(model.logits(x)[0]))


# --------------------------------------------------------------------------
# Grad-CAM


def bilinear_resize(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and clamped edges."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape
    H, W = shape

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, H)
    c0, c1, fc = axis(w, W)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def gradcam_from_maps(acts: np.ndarray, grads: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Normalized ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean of
    the gradients; ``acts`` and ``grads`` are [K, h, w]."""
    acts = np.asarray(acts, dtype=np.float64)
    alpha = np.asarray(grads, dtype=np.float64).mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, acts, axes=1), 0.0)
    return normalize_minmax(raw, eps)


def _layer_gradient(model: Sequential, x: np.ndarray, tap: str, target: int):
    """Activations at a tap and d(logit_target)/d(activations)."""
    start = model.taps[tap]
    with no_grad():
        h = model.prepare(Tensor(x))
        for layer in model.layers[: start + 1]:
            h = layer(h)
    acts = Tensor(h.data, requires_grad=True)
    with model.frozen():
        out = acts
        for layer in model.layers[start + 1 :]:
            out = layer(out)
        backward(select(out, (0, target)))
    return model.to_chw(acts.data)[0], model.to_chw(acts.grad)[0], out.data[0]


def gradcam(model: Sequential, img, target_class: int | None = None, eps: float = EPS) -> SaliencyMap:
    x = as_batch(img, model.config.input_hw if model.config else None)
    c = _predicted_class(model, x) if target_class is None else _check_class(model, target_class)
    acts, grads, logits = _layer_gradient(model, x, "last_conv", c)
    alpha = grads.astype(np.float64).mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, acts.astype(np.float64), axes=1), 0.0)
    # bilinear interpolation is linear and keeps the map non-negative, so
    # normalizing after the resize leaves the exact 0/1 endpoints in place
    values = normalize_minmax(bilinear_resize(raw, x.shape[-2:]), eps)
    return SaliencyMap(values, "gradcam", c, eps, {"grid": list(raw.shape), "logits": logits.tolist()})


# --------------------------------------------------------------------------
# DeepLIFT


def _forward_trace(model: Sequential, x: np.ndarray) -> list[np.ndarray]:
    """Input of every layer followed by the final output."""
    with no_grad():
        h = model.prepare(Tensor(x))
        trace = [h.data]
        for layer in model.layers:
            h = layer(h)
            trace.append(h.data)
    return trace


def deeplift_contributions(model: Sequential, x: np.ndarray, reference: np.ndarray, target: int) -> np.ndarray:
    """Rescale-rule contributions of every input element to logit ``target``.

    Returns an array shaped like ``x``; summed, it matches the logit delta
    exactly for pool-free nets.
    """
    x = np.asarray(x, dtype=np.float32)
    reference = np.asarray(reference, dtype=np.float32)
    if x.shape != reference.shape:
        raise ValueError(f"reference shape {reference.shape} does not match input {x.shape}")
    tx = _forward_trace(model, x)
    tr = _forward_trace(model, reference)
    m = np.zeros(tx[-1].shape, dtype=np.float64)
    m[:, target] = 1.0
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        xin, rin = tx[i], tr[i]
        if layer.kind == "linear":
            m = m @ layer.weight.data.astype(np.float64)
        elif layer.kind == "conv":
            grad_input = conv2d_grad_input_nhwc if layer.layout == "NHWC" else conv2d_grad_input
            m = grad_input(m.astype(np.float32), layer.weight.data, xin.shape, layer.stride, layer.pad).astype(np.float64)
        elif layer.kind == "relu":
            dx = xin.astype(np.float64) - rin
            dy = tx[i + 1].astype(np.float64) - tr[i + 1]
            big = np.abs(dx) > RESCALE_THRESHOLD
            slope = np.where(big, dy / np.where(big, dx, 1.0), (rin > 0).astype(np.float64))
            m = m * slope
        elif layer.kind == "pool":
            # route through the actual input's switches
            _, offset = _pool_offsets(xin, layer.size, layer.layout)
            m = _scatter_offsets(m.astype(np.float32), offset, xin.shape, layer.size, layer.layout).astype(np.float64)
        elif layer.kind == "flatten":
            if layer.layout == "NHWC" and xin.ndim == 4:
                n, h, w, c = xin.shape
                m = m.reshape(n, c, h, w).transpose(0, 2, 3, 1)
            else:
                m = m.reshape(xin.shape)
        else:
            raise TypeError(f"deeplift: unsupported layer kind {layer.kind!r}")
    if model.layout == "NHWC" and m.ndim == 4:
        m = m.transpose(0, 3, 1, 2)
    return m * (x.astype(np.float64) - reference)


def deeplift(model: Sequential, img, target_class: int | None = None, reference=None, eps: float = EPS) -> SaliencyMap:
    """DeepLIFT saliency against a signal-free reference image (the
    background color of ``img`` unless given)."""
    x = as_batch(img, model.config.input_hw if model.config else None)
    if reference is None:
        reference = np.full_like(x, fill_value_of(img))
    reference = as_batch(reference)
    if reference.shape != x.shape:
        raise ValueError(f"reference shape {reference.shape[-2:]} does not match input {x.shape[-2:]}")
    c = _predicted_class(model, x) if target_class is None else _check_class(model, target_class)
    contrib = deeplift_contributions(model, x, reference, c)
    delta = float(model.logits(x)[0, c] - model.logits(reference)[0, c])
    values = normalize_minmax(np.maximum(contrib[0].sum(axis=0), 0.0), eps)
    meta = {"contribution_sum": float(contrib.sum()), "logit_delta": delta, "reference": float(reference.flat[0])}
    return SaliencyMap(values, "deeplift", c, eps, meta)


# --------------------------------------------------------------------------
# SHAP via expected gradients


@dataclass
class ShapConfig:
    background_count: int = 50
    interpolation_samples_per_background: int = 8
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self):
        if self.background_count < 1:
            raise ValueError("background_count must be at least 1")
        if self.interpolation_samples_per_background < 1:
            raise ValueError("interpolation_samples_per_background must be at least 1")


def input_gradients(model: Sequential, points: np.ndarray, target: int, batch_size: int = 32) -> np.ndarray:
    """d(logit_target)/d(input) for each row of ``points``."""
    out = np.empty(points.shape, dtype=np.float32)
    with model.frozen():
        for lo in range(0, len(points), batch_size):
            xt = Tensor(points[lo : lo + batch_size], requires_grad=True)
            logits = model.forward(xt)
            backward(sum_all(select(logits, (slice(None), target))))
            out[lo : lo + batch_size] = xt.grad
    return out


def shap_values(model: Sequential, x: np.ndarray, backgrounds: np.ndarray, target: int, cfg: ShapConfig) -> np.ndarray:
    """Expected-gradients attributions, shaped like ``x`` ([1, C, H, W])."""
    m = cfg.interpolation_samples_per_background
    total = np.zeros(x.shape[1:], dtype=np.float64)
    for bi, b in enumerate(backgrounds):
        rng = rng_for(cfg.seed, 0x5AA9, bi)
        u = (np.arange(m) + rng.uniform(size=m)) / m  # one draw per stratum
        diff = (x[0] - b).astype(np.float64)
        points = (b[None] + u[:, None, None, None] * diff[None]).astype(np.float32)
        grads = input_gradients(model, points, target, cfg.batch_size).astype(np.float64)
        total += diff * grads.sum(axis=0)
    return (total / (m * len(backgrounds)))[None]


def _as_backgrounds(backgrounds, shape) -> np.ndarray:
    arr = np.asarray([as_batch(b)[0] for b in backgrounds], dtype=np.float32) if len(backgrounds) else None
    if arr is None:
        raise DataError("shap_explain needs at least one background sample")
    if arr.shape[1:] != tuple(shape):
        raise ValueError(f"background shape {arr.shape[1:]} does not match input {tuple(shape)}")
    return arr


def shap_explain(model: Sequential, img, backgrounds, cfg: ShapConfig | None = None, target_class: int | None = None, eps: float = EPS) -> SaliencyMap:
    cfg = cfg or ShapConfig()
    x = as_batch(img, model.config.input_hw if model.config else None)
    bgs = _as_backgrounds(backgrounds, x.shape[1:])
    if len(bgs) > cfg.background_count:
        keep = np.sort(rng_for(cfg.seed, 0xB6).choice(len(bgs), cfg.background_count, replace=False))
        bgs = bgs[keep]
    c = _predicted_class(model, x) if target_class is None else _check_class(model, target_class)
    phi = shap_values(model, x, bgs, c, cfg)
    values = normalize_minmax(np.maximum(phi[0].sum(axis=0), 0.0), eps)
    meta = {"backgrounds": len(bgs), "samples_per_background": cfg.interpolation_samples_per_background, "seed": cfg.seed}
    return SaliencyMap(values, "shap", c, eps, meta)


# --------------------------------------------------------------------------
# rendering and persistence

JET = np.array(
    [
        (0.0, 0.0, 0.0, 0.5),
        (0.125, 0.0, 0.0, 1.0),
        (0.375, 0.0, 1.0, 1.0),
        (0.625, 1.0, 1.0, 0.0),
        (0.875, 1.0, 0.0, 0.0),
        (1.0, 0.5, 0.0, 0.0),
    ]
)


def jet(v) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, JET[:, 0], JET[:, k]) for k in (1, 2, 3)], axis=-1)


def overlay(img, smap: SaliencyMap | np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """``alpha * jet(map) + (1 - alpha) * gray`` as float RGB in [0, 1]."""
    gray = as_batch(img)[0, 0].astype(np.float64)
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    if values.shape != gray.shape:
        raise ValueError(f"saliency map {values.shape} does not match image {gray.shape}")
    return alpha * jet(values) + (1.0 - alpha) * gray[..., None]


def save_saliency(smap: SaliencyMap, img, stem, extra: dict | None = None) -> dict[str, Path]:
    """Write ``stem.bwxa`` (raw values), ``stem.png`` (overlay) and ``stem.json``."""
    stem = Path(stem)
    paths = {"raw": stem.with_suffix(".bwxa"), "overlay": stem.with_suffix(".png"), "sidecar": stem.with_suffix(".json")}
    meta = {"method": smap.method, "target_class": smap.target_class, "eps": smap.eps, **smap.meta, **(extra or {})}
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        tensorio.save(paths["raw"], {"saliency": smap.values.astype(np.float32)}, {"kind": "saliency", **meta})
        write_png(overlay(img, smap), paths["overlay"])
        paths["sidecar"].write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write saliency artifacts {stem}: {exc}") from None
    return paths


def load_saliency(path) -> SaliencyMap:
    header, tensors = tensorio.load(path)
    if "saliency" not in tensors:
        raise DataError(f"{path}: no saliency tensor")
    return SaliencyMap(tensors["saliency"], header["method"], header["target_class"], header.get("eps", EPS))

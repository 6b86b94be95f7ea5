"""Pixelwise fusion of two saliency maps and threshold-coverage curves."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .xai import EPS, SaliencyMap, normalize_minmax

THRESHOLDS = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
COVERAGE_CSV_HEADER = "method,threshold,fraction"


@dataclass(frozen=True)
class EnsembleConfig:
    w1: float = 0.5
    w2: float = 0.5
    strategy: str = "average"

    def __post_init__(self):
        if self.strategy not in ("average", "max"):
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("fusion weights must be non-negative")
        if self.strategy == "average" and abs(self.w1 + self.w2 - 1.0) > 1e-12:
            raise ValueError("average fusion weights must sum to 1")


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, SaliencyMap) else np.asarray(m, dtype=np.float64)


def _pair(a, b):
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ValueError(f"saliency maps differ in shape: {va.shape} vs {vb.shape}")
    target = a.target_class if isinstance(a, SaliencyMap) else -1
    return va, vb, target


def fuse_average(h_cam, h_ldf, w1: float = 0.5, w2: float = 0.5, renormalize: bool = False) -> SaliencyMap:
    """``w1 * H_cam + w2 * H_ldf`` on already normalized maps."""
    if w1 < 0 or w2 < 0:
        raise ValueError("fusion weights must be non-negative")
    va, vb, c = _pair(h_cam, h_ldf)
    out = w1 * va + w2 * vb
    if renormalize:
        out = normalize_minmax(out)
    return SaliencyMap(out, "ensemble_avg", c, EPS, {"w1": w1, "w2": w2})


def fuse_max(h_cam, h_ldf, renormalize: bool = False) -> SaliencyMap:
    va, vb, c = _pair(h_cam, h_ldf)
    out = np.maximum(va, vb)
    if renormalize:
        out = normalize_minmax(out)
    return SaliencyMap(out, "ensemble_max", c, EPS)


def fuse(h_cam, h_ldf, cfg: EnsembleConfig | None = None) -> SaliencyMap:
    cfg = cfg or EnsembleConfig()
    if cfg.strategy == "max":
        return fuse_max(h_cam, h_ldf)
    return fuse_average(h_cam, h_ldf, cfg.w1, cfg.w2)


@dataclass
class CoverageCurve:
    thresholds: np.ndarray
    fraction_above: np.ndarray
    method: str = ""


def threshold_coverage(h, thresholds: Sequence[float] = THRESHOLDS, method: str | None = None) -> CoverageCurve:
    """Fraction of pixels strictly above each threshold (thresholds sorted)."""
    v = _values(h).ravel()
    t = np.sort(np.asarray(thresholds, dtype=np.float64))
    # count of v > t via a sorted search: index of first element > t
    sv = np.sort(v)
    above = sv.size - np.searchsorted(sv, t, side="right")
    label = method if method is not None else (h.method if isinstance(h, SaliencyMap) else "")
    return CoverageCurve(t, above / max(sv.size, 1), label)


@dataclass
class CoverageReport:
    thresholds: np.ndarray
    mean: dict[str, np.ndarray]
    per_sample: dict[str, list[np.ndarray]] = field(default_factory=dict)
    violations: list[tuple[int, float]] = field(default_factory=list)

    def csv(self) -> str:
        buf = io.StringIO()
        buf.write(COVERAGE_CSV_HEADER + "\n")
        for method, curve in self.mean.items():
            for t, f in zip(self.thresholds, curve):
                buf.write(f"{method},{t:.1f},{f:.6f}\n")
        return buf.getvalue()

    def per_sample_csv(self, sample_ids: Sequence[str]) -> str:
        buf = io.StringIO()
        buf.write("sample_id," + COVERAGE_CSV_HEADER + "\n")
        for method, curves in self.per_sample.items():
            for sid, curve in zip(sample_ids, curves):
                for t, f in zip(self.thresholds, curve):
                    buf.write(f"{sid},{method},{t:.1f},{f:.6f}\n")
        return buf.getvalue()

    @property
    def identity_holds(self) -> bool:
        return not self.violations

    def write(self, csv_path, plot_path=None) -> None:
        try:
            Path(csv_path).write_text(self.csv())
            if plot_path is not None:
                plot_coverage(self, plot_path)
        except OSError as exc:
            raise DataError(f"cannot write coverage report: {exc}") from None


def coverage_report(maps: Mapping[str, Sequence], thresholds: Sequence[float] = THRESHOLDS) -> CoverageReport:
    """Mean coverage curve per method over a sample set.

    ``maps`` maps a method label to one saliency map per sample (same
    sample order for every method). When ``gradcam``, ``deeplift`` and
    ``ensemble_max`` are all present the max-coverage identity is checked
    per sample and threshold; violations are listed as (sample, threshold).
    """
    if not maps or not any(len(v) for v in maps.values()):
        raise DataError("coverage report needs at least one sample")
    n = {len(v) for v in maps.values()}
    if len(n) != 1:
        raise ValueError("every method needs the same number of samples")
    shapes = {_values(m).shape for v in maps.values() for m in v}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent saliency map shapes: {sorted(shapes)}")
    t = np.sort(np.asarray(thresholds, dtype=np.float64))
    per = {m: [threshold_coverage(h, t, m).fraction_above for h in v] for m, v in maps.items()}
    mean = {m: np.mean(curves, axis=0) for m, curves in per.items()}
    violations = []
    if {"gradcam", "deeplift", "ensemble_max"} <= set(per):
        for i, (cm, cg, cd) in enumerate(zip(per["ensemble_max"], per["gradcam"], per["deeplift"])):
            for j in np.flatnonzero(cm < np.maximum(cg, cd)):
                violations.append((i, float(t[j])))
    return CoverageReport(t, mean, per, violations)


def plot_coverage(report: CoverageReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method, curve in report.mean.items():
        ax.plot(report.thresholds, 100 * curve, marker="o", label=method)
    ax.set_xlabel("threshold")
    ax.set_ylabel("pixels above threshold (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)

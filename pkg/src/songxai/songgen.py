"""Synthetic two-variant bird song with planted sub-clusters.

Both classes open with the same kind of frequency-modulated whistles (their
shape depends only on the cluster id), so the class evidence sits entirely in
the terminal block: a few slow low-mid elements for ``eastern`` and a fast
high trill for ``mexican``.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import BACKGROUNDS, DspConfig, Waveform, save_spectrogram, waveform_to_image, write_wav
from .errors import DataError

logger = logging.getLogger(__name__)

CLASSES = ("eastern", "mexican")
NOISE_DB = -30.0
PEAK = 0.9
TERMINAL_END_S = 3.9


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("SONGXAI_THREADS", "1")))
    except ValueError:
        return 1


def rng_for(*keys: int) -> np.random.Generator:
    """Independent PCG64 stream keyed by integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SongSpec:
    cls: str
    cluster: int
    seed: int
    duration_s: float = 4.0
    sample_rate: int = 48000
    clusters_per_class: int = 4

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown class {self.cls!r}; expected one of {CLASSES}")
        if not 0 <= self.cluster < self.clusters_per_class:
            raise ValueError(f"cluster {self.cluster} outside 0..{self.clusters_per_class - 1}")


@dataclass(frozen=True)
class ClusterParams:
    intro_hz: float
    intro_up: bool
    terminal_hz: float
    terminal_sweep_hz: float
    period_s: float
    count: int
    element_s: float

    @property
    def rate_hz(self) -> float:
        return 1.0 / self.period_s


def cluster_params(cls: str, cluster: int, clusters_per_class: int = 4) -> ClusterParams:
    """Fixed per-cluster offsets; ``u`` spreads clusters evenly over each range."""
    u = 0.5 if clusters_per_class == 1 else cluster / (clusters_per_class - 1)
    intro_hz = 3900.0 + 900.0 * u
    intro_up = cluster % 2 == 0
    if cls == "eastern":
        period = 0.42 - 0.12 * u
        return ClusterParams(intro_hz, intro_up, 2300.0 + 900.0 * u, 150.0, period, 3 if u < 0.5 else 4, 0.6 * period)
    period = 1.0 / (9.0 + 6.0 * u)
    return ClusterParams(intro_hz, intro_up, 4600.0 + 1800.0 * u, 350.0, period, int(round(10 + 6 * u)), 0.55 * period)


def _element(t: np.ndarray, start: float, dur: float, f0: float, f1: float, amp: float) -> np.ndarray:
    """Linear-chirp tone burst with a Hann envelope."""
    out = np.zeros_like(t)
    sel = (t >= start) & (t < start + dur)
    tau = t[sel] - start
    phase = 2 * np.pi * (f0 * tau + 0.5 * (f1 - f0) / dur * tau**2)
    out[sel] = amp * np.sin(np.pi * tau / dur) ** 2 * np.sin(phase)
    return out


def generate_song(spec: SongSpec) -> Waveform:
    rng = rng_for(spec.seed)
    p = cluster_params(spec.cls, spec.cluster, spec.clusters_per_class)
    n = int(round(spec.duration_s * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    x = np.zeros(n)

    # intro whistles
    for i in range(int(rng.integers(2, 4))):
        start = 0.25 + 0.65 * i + rng.uniform(-0.05, 0.05)
        dur = rng.uniform(0.35, 0.45)
        center = p.intro_hz * rng.uniform(0.98, 1.02)
        lo, hi = center - 250.0, center + 250.0
        f0, f1 = (lo, hi) if p.intro_up else (hi, lo)
        x += _element(t, start, dur, f0, f1, rng.uniform(0.4, 0.5))

    # terminal block
    period = p.period_s * rng.uniform(0.98, 1.02)
    element = p.element_s * period / p.period_s
    center = p.terminal_hz * rng.uniform(0.98, 1.02)
    span = (p.count - 1) * period + element
    start = TERMINAL_END_S - span + rng.uniform(-0.03, 0.03)
    for i in range(p.count):
        amp = rng.uniform(0.75, 0.85)
        if spec.cls == "eastern":
            f0, f1 = center - p.terminal_sweep_hz, center + p.terminal_sweep_hz
        else:
            f0, f1 = center + p.terminal_sweep_hz, center - p.terminal_sweep_hz
        x += _element(t, start + i * period, element, f0, f1, amp)

    # 1/f-shaped background noise
    white = rng.standard_normal(n)
    pink = signal.lfilter([1.0], [1.0, -0.95], white)
    pink *= np.abs(x).max() * 10 ** (NOISE_DB / 20) / np.sqrt(np.mean(pink**2))
    x += pink

    peak = np.abs(x).max()
    if peak > PEAK:
        x *= PEAK / peak
    return Waveform(x, spec.sample_rate)


# --------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSpec:
    per_class: int = 300
    clusters_per_class: int = 4
    backgrounds: tuple[str, ...] = ("black", "white")
    split_fraction: float = 2 / 3
    seed: int = 42

    def __post_init__(self):
        if self.per_class < self.clusters_per_class:
            raise ValueError("per_class must be at least clusters_per_class")
        if not self.backgrounds or any(b not in BACKGROUNDS for b in self.backgrounds):
            raise ValueError(f"backgrounds must be a non-empty subset of {BACKGROUNDS}")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie strictly between 0 and 1")
        self.backgrounds = tuple(self.backgrounds)


@dataclass
class SampleRecord:
    id: str
    wav: str
    png: str
    cls: str
    cluster: int
    background: str
    split: str
    seed: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["class"] = d.pop("cls")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SampleRecord":
        d = dict(d)
        d["cls"] = d.pop("class")
        return cls(**d)


@dataclass
class DatasetManifest:
    classes: list[str] = field(default_factory=lambda: list(CLASSES))
    samples: list[SampleRecord] = field(default_factory=list)
    root: Path | None = None

    def to_json(self) -> dict:
        return {"classes": list(self.classes), "samples": [s.to_json() for s in self.samples]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None
        return cls(raw["classes"], [SampleRecord.from_json(s) for s in raw["samples"]], path.parent)

    def resolve(self, rel: str) -> Path:
        return (self.root / rel) if self.root is not None else Path(rel)

    def label_of(self, rec: SampleRecord) -> int:
        return self.classes.index(rec.cls)

    def select(self, split: str | None = None, background: str = "mixed") -> list[SampleRecord]:
        """Records of one split under a background configuration
        (``black``, ``white`` or ``mixed`` for both)."""
        if background not in (*BACKGROUNDS, "mixed"):
            raise ValueError(f"unknown background configuration {background!r}")
        out = []
        for s in self.samples:
            if split is not None and s.split != split:
                continue
            if background != "mixed" and s.background != background:
                continue
            out.append(s)
        return out


def _render_sample(args):
    song, wav_path, renders, dsp = args
    wave = generate_song(song)
    try:
        write_wav(wave, wav_path)
        for bg, png_path in renders:
            img = waveform_to_image(wave, bg, dsp)
            img.label, img.cluster = song.cls, song.cluster
            save_spectrogram(img, png_path, dsp, {"seed": song.seed})
    except OSError as exc:
        raise DataError(f"cannot write sample {wav_path}: {exc}") from None


def generate_dataset(spec: DatasetSpec, out_dir, dsp: DspConfig | None = None, workers: int | None = None) -> DatasetManifest:
    """Write WAV + spectrogram PNGs for a balanced dataset and its manifest."""
    dsp = dsp or DspConfig()
    out = Path(out_dir)
    try:
        (out / "wav").mkdir(parents=True, exist_ok=True)
        (out / "png").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc}") from None

    records: list[SampleRecord] = []
    jobs = []
    n_train = int(round(spec.per_class * spec.split_fraction))
    for ci, cls in enumerate(CLASSES):
        perm = rng_for(spec.seed, 7919, ci).permutation(spec.per_class)
        split_of = np.empty(spec.per_class, dtype=object)
        split_of[perm[:n_train]] = "train"
        split_of[perm[n_train:]] = "test"
        for i in range(spec.per_class):
            cluster = i % spec.clusters_per_class
            seed = derive_seed(spec.seed, ci, i)
            sid = f"{cls}_{i:04d}"
            wav_rel = f"wav/{sid}.wav"
            renders = []
            for bg in spec.backgrounds:
                png_rel = f"png/{sid}_{bg}.png"
                renders.append((bg, out / png_rel))
                records.append(SampleRecord(sid, wav_rel, png_rel, cls, cluster, bg, str(split_of[i]), seed))
            song = SongSpec(cls, cluster, seed, clusters_per_class=spec.clusters_per_class)
            jobs.append((song, out / wav_rel, renders, dsp))

    workers = workers or default_workers()
    logger.info("rendering %d songs with %d worker(s)", len(jobs), workers)
    if workers == 1:
        for job in jobs:
            _render_sample(job)
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(_render_sample, jobs))

    manifest = DatasetManifest(list(CLASSES), records, out)
    manifest.save(out / "manifest.json")
    return manifest

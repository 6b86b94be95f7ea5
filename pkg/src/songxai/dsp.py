"""Audio to spectrogram-image conversion.

The chain is decode -> 4 s clips -> 1.5-9 kHz zero-phase band-pass -> Hann
STFT (512 samples, hop 26) -> dB relative to the clip maximum -> 480x960
raster with a black or white background.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from scipy import signal

from .errors import DataError

CANONICAL_HW = (480, 960)
SAMPLE_RATE = 48000
DB_FLOOR = -120.0
BACKGROUNDS = ("black", "white")

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise DataError("waveform must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = np.clip(s, -1.0, 1.0)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class StftFrames:
    magnitude_db: np.ndarray  # [n_bins, n_frames]
    bin_hz: float
    hop_samples: int
    window_len: int

    @property
    def n_frames(self) -> int:
        return self.magnitude_db.shape[1]


@dataclass
class SpectrogramImage:
    pixels: np.ndarray
    background: str = "black"
    freq_range_hz: tuple[float, float] = (0.0, 12000.0)
    duration_s: float = 4.0
    label: str | None = None
    cluster: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def fill_value(self) -> float:
        """Intensity meaning "no signal" on this background."""
        return 0.0 if self.background == "black" else 1.0


@dataclass
class DspConfig:
    clip_seconds: float = 4.0
    band_hz: tuple[float, float] = (1500.0, 9000.0)
    window_len: int = 512
    overlap: float = 0.95
    dyn_range_db: tuple[float, float] = (-40.0, 5.0)
    freq_max_hz: float = 12000.0
    scale: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DspConfig":
        d = dict(d)
        for key in ("band_hz", "dyn_range_db"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def image_shape(scale: int = 1) -> tuple[int, int]:
    if scale not in (1, 2, 4):
        raise ValueError(f"scale must be 1, 2 or 4, got {scale}")
    return CANONICAL_HW[0] // scale, CANONICAL_HW[1] // scale


# --------------------------------------------------------------------------
# WAV codec


def decode_wav(data: bytes) -> Waveform:
    """Parse a RIFF/WAVE byte string (PCM16, PCM24 or float32).

    Multichannel files yield their first channel.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DataError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise DataError(f"truncated {cid!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise DataError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _FMT_EXTENSIBLE:
                if size < 40:
                    raise DataError("extensible fmt chunk too short")
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise DataError("missing fmt or data chunk")
    tag, channels, rate, _, block, bits = fmt
    if channels < 1:
        raise DataError("zero channels")
    if tag == _FMT_PCM and bits == 16:
        x = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FMT_PCM and bits == 24:
        raw = np.frombuffer(payload[: len(payload) // 3 * 3], dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        x = ints.astype(np.float64) / 8388608.0
    elif tag == _FMT_FLOAT and bits == 32:
        x = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise DataError(f"unsupported WAV encoding (format tag {tag}, {bits} bits)")
    frames = x.size // channels
    if frames == 0:
        raise DataError("WAV file contains no samples")
    x = x[: frames * channels].reshape(frames, channels)[:, 0]
    return Waveform(x, rate)


def read_wav(path) -> Waveform:
    try:
        return decode_wav(Path(path).read_bytes())
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def encode_wav_pcm16(w: Waveform) -> bytes:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
    fmt = struct.pack("<HHIIHH", _FMT_PCM, 1, w.sample_rate, w.sample_rate * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(w: Waveform, path) -> None:
    Path(path).write_bytes(encode_wav_pcm16(w))


# --------------------------------------------------------------------------
# signal chain


def segment_clips(w: Waveform, clip_seconds: float = 4.0) -> list[Waveform]:
    """Consecutive non-overlapping clips; a trailing partial clip is dropped."""
    n = int(round(clip_seconds * w.sample_rate))
    count = w.samples.size // n
    return [Waveform(w.samples[i * n : (i + 1) * n], w.sample_rate) for i in range(count)]


def bandpass(w: Waveform, lo: float = 1500.0, hi: float = 9000.0) -> Waveform:
    """4th-order Butterworth band-pass run forward and backward."""
    if not 0 < lo < hi < w.sample_rate / 2:
        raise ValueError(f"invalid band {lo}-{hi} Hz for sample rate {w.sample_rate}")
    sos = signal.butter(2, [lo, hi], btype="bandpass", fs=w.sample_rate, output="sos")
    y = signal.sosfiltfilt(sos, w.samples)
    return Waveform(y, w.sample_rate)


def hop_length(window_len: int = 512, overlap: float = 0.95) -> int:
    return max(1, int(round(window_len * (1.0 - overlap))))


def stft(w: Waveform, window_len: int = 512, overlap: float = 0.95) -> StftFrames:
    """Hann-windowed magnitude STFT in dB relative to the clip maximum."""
    if w.samples.size < window_len:
        raise DataError(f"signal of {w.samples.size} samples is shorter than one {window_len}-sample window")
    hop = hop_length(window_len, overlap)
    frames = sliding_window_view(w.samples, window_len)[::hop]
    mag = np.abs(np.fft.rfft(frames * np.hanning(window_len), axis=1)).T
    peak = mag.max()
    if peak < 1e-12:
        db = np.full(mag.shape, DB_FLOOR)
    else:
        with np.errstate(divide="ignore"):
            db = 20.0 * np.log10(mag / peak)
        db = np.maximum(db, DB_FLOOR)
    return StftFrames(db.astype(np.float32), w.sample_rate / window_len, hop, window_len)


def _column_max(db: np.ndarray, width: int) -> np.ndarray:
    n = db.shape[1]
    edges = (np.arange(width + 1) * n) // width
    if (np.diff(edges) == 0).any():
        raise DataError(f"{n} frames cannot fill {width} columns")
    return np.maximum.reduceat(db, edges[:-1], axis=1)


def render_spectrogram(
    frames: StftFrames,
    background: str = "black",
    dyn_range: tuple[float, float] = (-40.0, 5.0),
    scale: int = 1,
    freq_max_hz: float = 12000.0,
) -> SpectrogramImage:
    """Rasterize STFT frames: per-column max over time, linear interpolation
    over frequency with 0 Hz on the bottom row."""
    if background not in BACKGROUNDS:
        raise ValueError(f"background must be one of {BACKGROUNDS}, got {background!r}")
    h, wd = image_shape(scale)
    top_bin = freq_max_hz / frames.bin_hz
    n_sel = int(np.floor(top_bin + 1e-9)) + 1
    cols = _column_max(frames.magnitude_db[:n_sel].astype(np.float64), wd)
    pos = np.linspace(0.0, top_bin, h)
    lo = np.minimum(np.floor(pos).astype(int), n_sel - 1)
    hi = np.minimum(lo + 1, n_sel - 1)
    frac = (pos - lo)[:, None]
    grid = cols[lo] * (1 - frac) + cols[hi] * frac
    grid = grid[::-1]
    lo_db, hi_db = dyn_range
    val = (np.clip(grid, lo_db, hi_db) - lo_db) / (hi_db - lo_db)
    if background == "white":
        val = 1.0 - val
    rate = frames.bin_hz * frames.window_len
    duration = ((frames.n_frames - 1) * frames.hop_samples + frames.window_len) / rate
    return SpectrogramImage(val, background, (0.0, float(freq_max_hz)), round(duration, 2))


def waveform_to_image(w: Waveform, background: str = "black", cfg: DspConfig | None = None) -> SpectrogramImage:
    cfg = cfg or DspConfig()
    if w.sample_rate != SAMPLE_RATE:
        raise DataError(f"sample rate {w.sample_rate} Hz not supported; resample to {SAMPLE_RATE} Hz first")
    filtered = bandpass(w, *cfg.band_hz)
    frames = stft(filtered, cfg.window_len, cfg.overlap)
    return render_spectrogram(frames, background, cfg.dyn_range_db, cfg.scale, cfg.freq_max_hz)


# --------------------------------------------------------------------------
# image I/O


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Intensity [0, 1] -> 8-bit, rounding half up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(values: np.ndarray, path) -> None:
    arr = np.asarray(values)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(to_uint8(arr), mode=mode).save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return arr / np.float32(255.0)


def save_spectrogram(img: SpectrogramImage, png_path, dsp: DspConfig | None = None, extra: dict | None = None) -> None:
    """Write the PNG plus a JSON sidecar next to it."""
    png_path = Path(png_path)
    write_png(img.pixels, png_path)
    meta = {
        "label": img.label,
        "cluster": img.cluster,
        "background": img.background,
        "shape": list(img.shape),
        "freq_range_hz": list(img.freq_range_hz),
        "duration_s": img.duration_s,
        "dsp": (dsp or DspConfig()).to_dict(),
    }
    if extra:
        meta.update(extra)
    png_path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_spectrogram(png_path, background: str | None = None) -> SpectrogramImage:
    png_path = Path(png_path)
    pixels = read_png(png_path)
    meta = {}
    side = png_path.with_suffix(".json")
    if side.exists():
        meta = json.loads(side.read_text())
    bg = background or meta.get("background", "black")
    return SpectrogramImage(pixels, bg, tuple(meta.get("freq_range_hz", (0.0, 12000.0))), meta.get("duration_s", 4.0),
                            meta.get("label"), meta.get("cluster"))

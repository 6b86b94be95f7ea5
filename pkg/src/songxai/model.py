"""Five-block spectrogram CNN: training, evaluation and checkpoints."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensorio
from .dsp import SpectrogramImage, read_png
from .errors import DataError
from .songgen import DatasetManifest, SampleRecord, rng_for
from .tensor import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    conv2d,
    cross_entropy,
    flatten,
    linear,
    maxpool2d,
    no_grad,
    relu,
    softmax,
    transpose,
)

logger = logging.getLogger(__name__)

POSITIVE_CLASS = 0  # "eastern"
OUTPUT_INIT_SCALE = 0.01  # near-uniform class probabilities at step 0


@dataclass
class ModelConfig:
    conv_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    kernel: int = 3
    pad: int = 1
    conv_stride: int = 1
    pool: int = 2
    pool_stride: int = 2
    fc_sizes: tuple[int, ...] = (512, 1024, 2)
    in_channels: int = 1
    input_hw: tuple[int, int] = (120, 240)
    strict: bool = False

    @classmethod
    def canonical(cls) -> "ModelConfig":
        return cls(input_hw=(480, 960), strict=True)

    @classmethod
    def for_scale(cls, scale: int) -> "ModelConfig":
        if scale == 1:
            return cls.canonical()
        return cls(input_hw=(480 // scale, 960 // scale))

    def block_shapes(self) -> list[tuple[int, int]]:
        """Spatial size entering each conv block, then after the last pool."""
        h, w = self.input_hw
        shapes = []
        for _ in self.conv_channels:
            shapes.append((h, w))
            h = (h + 2 * self.pad - self.kernel) // self.conv_stride + 1
            w = (w + 2 * self.pad - self.kernel) // self.conv_stride + 1
            h, w = h // self.pool_stride, w // self.pool_stride
        shapes.append((h, w))
        return shapes

    @property
    def flatten_size(self) -> int:
        h, w = self.block_shapes()[-1]
        return self.conv_channels[-1] * h * w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("conv_channels", "fc_sizes", "input_hw"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 20
    batch_size: int = 64
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")


# --------------------------------------------------------------------------
# layers


class Conv2d:
    kind = "conv"

    def __init__(self, name: str, cin: int, cout: int, k: int = 3, stride: int = 1, pad: int = 1, layout: str = "NCHW"):
        self.name, self.stride, self.pad, self.layout = name, stride, pad, layout
        self.weight = Tensor(np.zeros((cout, cin, k, k)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad, self.layout)

    def params(self):
        return [self.weight, self.bias]

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight.shape[1:]))


class Linear:
    kind = "linear"

    def __init__(self, name: str, fin: int, fout: int):
        self.name = name
        self.weight = Tensor(np.zeros((fout, fin)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(fout), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def params(self):
        return [self.weight, self.bias]

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]


class ReLU:
    kind = "relu"
    name = "relu"

    def __call__(self, x: Tensor) -> Tensor:
        return relu(x)

    def params(self):
        return []


class MaxPool2d:
    kind = "pool"
    name = "pool"

    def __init__(self, size: int = 2, stride: int = 2, layout: str = "NCHW"):
        self.size, self.stride, self.layout = size, stride, layout
        self.last_switches = None

    def __call__(self, x: Tensor) -> Tensor:
        out, self.last_switches = maxpool2d(x, self.size, self.stride, self.layout)
        return out

    def params(self):
        return []


class Flatten:
    """Flatten in channel-major (C, H, W) order whatever the activation layout."""

    kind = "flatten"
    name = "flatten"

    def __init__(self, layout: str = "NCHW"):
        self.layout = layout

    def __call__(self, x: Tensor) -> Tensor:
        if self.layout == "NHWC" and x.data.ndim == 4:
            x = transpose(x, (0, 3, 1, 2))
        return flatten(x)

    def params(self):
        return []


class Sequential:
    """Ordered layer stack. ``taps`` maps cache names to layer indices whose
    output is kept when ``forward(..., keep=True)``.

    Inputs are always NCHW; with ``layout="NHWC"`` they are transposed once
    on entry and every spatial activation stays channels-last inside.
    """

    def __init__(self, layers: Sequence, taps: dict[str, int] | None = None, config: ModelConfig | None = None, layout: str = "NCHW"):
        self.layers = list(layers)
        self.taps = dict(taps or {})
        self.config = config
        self.layout = layout
        self.opt_state: AdamState | None = None
        self.meta: dict = {}

    def prepare(self, x: Tensor) -> Tensor:
        """NCHW input -> the internal activation layout."""
        if self.layout == "NHWC" and x.data.ndim == 4:
            return transpose(x, (0, 2, 3, 1))
        return x

    def to_chw(self, a: np.ndarray) -> np.ndarray:
        """Internal [N, ...] activation -> channel-major layout."""
        if self.layout == "NHWC" and a.ndim == 4:
            return a.transpose(0, 3, 1, 2)
        return a

    def forward(self, x: Tensor, keep: bool = False):
        cache = {}
        inv = {i: name for name, i in self.taps.items()}
        x = self.prepare(x)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if keep and i in inv:
                cache[inv[i]] = x
        return (x, cache) if keep else x

    __call__ = forward

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for layer in self.layers for p in layer.params()}

    def decay_names(self) -> list[str]:
        return [n for n in self.parameters() if n.endswith(".weight")]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    @contextlib.contextmanager
    def frozen(self) -> Iterator["Sequential"]:
        """Stop recording parameter gradients inside the block."""
        params = list(self.parameters().values())
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f

    def logits(self, batch: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(batch)).data

    def predict_proba(self, batch: np.ndarray, chunk: int = 64) -> np.ndarray:
        out = [softmax(self.logits(batch[i : i + chunk])) for i in range(0, len(batch), chunk)]
        return np.concatenate(out)


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> Sequential:
    cfg = cfg or ModelConfig()
    h, w = cfg.input_hw
    depth = 2 ** len(cfg.conv_channels)
    if cfg.strict and (h % depth or w % depth):
        raise ValueError(f"input {h}x{w} is not divisible by {depth} on both axes")
    shapes = cfg.block_shapes()
    if min(shapes[-1]) < 1:
        raise ValueError(f"input {h}x{w} too small for {len(cfg.conv_channels)} pooling stages")
    if cfg.strict:
        assert shapes[-1] == (h // depth, w // depth)

    layers = []
    taps = {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.conv_channels, start=1):
        layers.append(Conv2d(f"conv{i}", cin, cout, cfg.kernel, cfg.conv_stride, cfg.pad, "NHWC"))
        layers.append(ReLU())
        taps[f"conv{i}"] = len(layers) - 1
        layers.append(MaxPool2d(cfg.pool, cfg.pool_stride, "NHWC"))
        cin = cout
    taps["last_conv"] = taps[f"conv{len(cfg.conv_channels)}"]
    layers.append(Flatten("NHWC"))
    fin = cfg.flatten_size
    for i, fout in enumerate(cfg.fc_sizes, start=1):
        layers.append(Linear(f"fc{i}", fin, fout))
        if i < len(cfg.fc_sizes):
            layers.append(ReLU())
            taps["features"] = len(layers) - 1
        fin = fout

    rng = rng_for(seed, 0x5EED)
    for layer in layers:
        if isinstance(layer, (Conv2d, Linear)):
            bound = np.sqrt(6.0 / layer.fan_in)
            if layer is layers[-1]:
                bound *= OUTPUT_INIT_SCALE
            layer.weight.data = rng.uniform(-bound, bound, layer.weight.shape).astype(np.float32)
    return Sequential(layers, taps, cfg, layout="NHWC")


# --------------------------------------------------------------------------
# inference


@dataclass
class Prediction:
    probabilities: np.ndarray
    logits: np.ndarray
    cache: dict = field(default_factory=dict)

    @property
    def label(self) -> int:
        return int(np.argmax(self.logits))


def as_batch(img, hw: tuple[int, int] | None = None) -> np.ndarray:
    """SpectrogramImage / 2-D / 3-D array -> float32 [1, 1, H, W]."""
    arr = img.pixels if isinstance(img, SpectrogramImage) else np.asarray(img)
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[None]
    if hw is not None and tuple(arr.shape[-2:]) != tuple(hw):
        raise ValueError(f"image is {arr.shape[-2]}x{arr.shape[-1]}, model expects {hw[0]}x{hw[1]}")
    return arr


def predict(model: Sequential, img) -> Prediction:
    x = as_batch(img, model.config.input_hw if model.config else None)
    with no_grad():
        logits, cache = model.forward(Tensor(x), keep=True)
    z = logits.data[0]
    cache = {k: model.to_chw(v.data)[0] for k, v in cache.items()}
    return Prediction(softmax(z[None])[0], z.astype(np.float64), cache)


# --------------------------------------------------------------------------
# data


def load_split(manifest: DatasetManifest, split: str, background: str = "mixed", hw=None):
    """Images and integer labels of one split, in manifest order."""
    recs = manifest.select(split, background)
    if not recs:
        raise DataError(f"no {split!r} samples for background {background!r}")
    images = []
    for rec in recs:
        arr = read_png(manifest.resolve(rec.png))
        if hw is not None and arr.shape != tuple(hw):
            raise DataError(f"{rec.png}: image {arr.shape} does not match model input {tuple(hw)}")
        images.append(arr)
    x = np.stack(images)[:, None]
    y = np.array([manifest.label_of(r) for r in recs], dtype=np.int64)
    return x, y, recs


# --------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    accuracy: float
    recall: float
    precision: float
    f1: float
    confusion: list[list[int]]  # [[TP, FN], [FP, TN]] w.r.t. the positive class

    @classmethod
    def from_confusion(cls, tp: int, fp: int, fn: int, tn: int) -> "Metrics":
        total = tp + fp + fn + tn
        acc = (tp + tn) / total if total else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        prec = tp / (tp + fp) if tp + fp else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        return cls(acc, rec, prec, f1, [[tp, fn], [fp, tn]])

    @classmethod
    def from_predictions(cls, y_true, y_pred, positive: int = POSITIVE_CLASS) -> "Metrics":
        t = np.asarray(y_true) == positive
        p = np.asarray(y_pred) == positive
        return cls.from_confusion(int((t & p).sum()), int((~t & p).sum()), int((t & ~p).sum()), int((~t & ~p).sum()))

    def csv_row(self, background: str) -> str:
        return f"{background},{self.accuracy:.6f},{self.recall:.6f},{self.precision:.6f},{self.f1:.6f}"


METRICS_CSV_HEADER = "background,accuracy,recall,precision,f1"


def format_metrics_table(rows: Sequence[tuple[str, Metrics]]) -> str:
    lines = [f"{'Background':<10} | {'Accuracy':>8} | {'Recall':>6} | {'Precision':>9} | {'F1 Score':>8}"]
    lines.append("-" * len(lines[0]))
    for name, m in rows:
        lines.append(
            f"{name.capitalize():<10} | {100 * m.accuracy:>7.2f}% | {m.recall:>6.4f} | {m.precision:>9.4f} | {m.f1:>8.4f}"
        )
    return "\n".join(lines)


def evaluate(model: Sequential, manifest: DatasetManifest, split: str = "test", background: str = "mixed") -> Metrics:
    x, y, _ = load_split(manifest, split, background, model.config.input_hw)
    pred = model.predict_proba(x).argmax(axis=1)
    return Metrics.from_predictions(y, pred)


# --------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float | None


def fit_arrays(model: Sequential, x: np.ndarray, y: np.ndarray, tc: TrainConfig, x_test=None, y_test=None, start_epoch: int = 0):
    """Mini-batch Adam on in-memory arrays. Returns per-epoch records."""
    if model.opt_state is None:
        model.opt_state = AdamState(lr=tc.lr, weight_decay=tc.weight_decay)
    else:
        model.opt_state.lr, model.opt_state.weight_decay = tc.lr, tc.weight_decay
    params = model.parameters()
    decay = model.decay_names()
    history = []
    n = len(x)
    for epoch in range(start_epoch, start_epoch + tc.epochs):
        order = rng_for(tc.seed, 0xE90C, epoch).permutation(n)
        loss_sum = 0.0
        correct = 0
        for lo in range(0, n, tc.batch_size):
            idx = order[lo : lo + tc.batch_size]
            model.zero_grad()
            logits = model.forward(Tensor(x[idx]))
            loss = cross_entropy(logits, y[idx])
            backward(loss)
            adam_step(params, model.opt_state, decay)
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
        test_acc = None
        if x_test is not None:
            test_acc = float((model.predict_proba(x_test).argmax(axis=1) == y_test).mean())
        rec = EpochRecord(epoch + 1, loss_sum / n, correct / n, test_acc)
        logger.info("epoch %d loss %.4f train acc %.4f test acc %s", rec.epoch, rec.train_loss, rec.train_accuracy, test_acc)
        history.append(rec)
    model.zero_grad()
    return history


def train(model: Sequential, manifest: DatasetManifest, tc: TrainConfig, background: str = "mixed"):
    """Train on the manifest's train split; returns ``(model, history)``."""
    hw = model.config.input_hw
    x, y, _ = load_split(manifest, "train", background, hw)
    if len(set(y.tolist())) < len(manifest.classes):
        raise DataError("training split needs at least one sample per class")
    x_test = y_test = None
    if manifest.select("test", background):
        x_test, y_test, _ = load_split(manifest, "test", background, hw)
    start = int(model.meta.get("epochs_run", 0))
    history = fit_arrays(model, x, y, tc, x_test, y_test, start_epoch=start)
    model.meta.update(
        epochs_run=start + tc.epochs,
        final_loss=history[-1].train_loss,
        seed=tc.seed,
        background=background,
    )
    return model, history


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Sequential, path) -> None:
    tensors = {name: p.data for name, p in model.parameters().items()}
    header = {"kind": "model", "config": model.config.to_dict(), "meta": model.meta}
    st = model.opt_state
    if st is not None:
        header["adam"] = {
            "step_count": st.step_count,
            "lr": st.lr,
            "weight_decay": st.weight_decay,
            "beta1": st.beta1,
            "beta2": st.beta2,
            "eps": st.eps,
        }
        for name in st.first_moment:
            tensors[f"adam.m.{name}"] = st.first_moment[name]
            tensors[f"adam.v.{name}"] = st.second_moment[name]
    tensorio.save(path, tensors, header)


def load_checkpoint(path) -> Sequential:
    header, tensors = tensorio.load(path)
    if header.get("kind") != "model" or "config" not in header:
        raise DataError(f"{path}: not a model checkpoint")
    cfg = ModelConfig.from_dict(header["config"])
    model = build_model(cfg, seed=0)
    params = model.parameters()
    missing = [n for n in params if n not in tensors]
    if missing:
        raise DataError(f"{path}: missing parameters {missing}")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise DataError(f"{path}: {name} has shape {tensors[name].shape}, expected {p.shape}")
    for name, p in params.items():
        p.data = tensors[name]
    if "adam" in header:
        a = header["adam"]
        st = AdamState(a["lr"], a["weight_decay"], a["beta1"], a["beta2"], a["eps"], a["step_count"])
        for name in params:
            if f"adam.m.{name}" in tensors:
                st.first_moment[name] = tensors[f"adam.m.{name}"]
                st.second_moment[name] = tensors[f"adam.v.{name}"]
        model.opt_state = st
    model.meta = dict(header.get("meta", {}))
    return model


def checkpoint_path(directory, background: str) -> Path:
    return Path(directory) / f"model_{background}.bwxa"


def record_image(manifest: DatasetManifest, rec: SampleRecord) -> SpectrogramImage:
    return SpectrogramImage(read_png(manifest.resolve(rec.png)), rec.background, label=rec.cls, cluster=rec.cluster)

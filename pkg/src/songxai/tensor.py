"""Dense float32 tensors with reverse-mode automatic differentiation.

Only the operations the spectrogram CNN needs are provided: 2-D convolution,
2x2 max pooling, ReLU, dense layers, cross-entropy, plus a handful of
elementwise helpers used by tests and attribution code. The raw numpy kernels
(``conv2d_forward``, ``conv2d_grad_input`` ...) are public because DeepLIFT
reuses them to push multipliers through the network.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError

logger = logging.getLogger(__name__)

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: produced non-finite values")


class Tensor:
    """An n-dimensional float32 array that may take part in a gradient tape.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    :func:`backward`; intermediate results only keep their gradient when
    :meth:`retain_grad` was called.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=None)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        _check_finite(arr, "Tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._retain = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=DTYPE)
        out.grad = None
        out.name = None
        out.op = op
        out._retain = False
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), Tensor(-1.0)))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


@dataclass
class TapeGraph:
    """Topologically ordered op nodes reachable from a root tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "TapeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> TapeGraph:
    """Populate ``.grad`` on every leaf that requires it.

    Leaf gradients accumulate across calls; zero them between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    graph = TapeGraph.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.astype(DTYPE) if node.grad is None else node.grad + g
            continue
        if node._retain:
            node.grad = g.astype(DTYPE)
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return graph


# --------------------------------------------------------------------------
# elementwise helpers


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bw(g):
        ga = g if a.shape == g.shape else np.asarray(g.sum(dtype=np.float64), dtype=DTYPE).reshape(a.shape)
        gb = g if b.shape == g.shape else np.asarray(g.sum(dtype=np.float64), dtype=DTYPE).reshape(b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def bw(g):
        ga = g * b.data
        gb = g * a.data
        if ga.shape != a.shape:
            ga = np.asarray(ga.sum(dtype=np.float64), dtype=DTYPE).reshape(a.shape)
        if gb.shape != b.shape:
            gb = np.asarray(gb.sum(dtype=np.float64), dtype=DTYPE).reshape(b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "mul")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=DTYPE)
    return Tensor._from_op(out, (a,), lambda g: (np.full(a.shape, g, dtype=DTYPE),), "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._from_op(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def select(a: Tensor, index: tuple) -> Tensor:
    """Basic-index a single element or slice; gradient scatters back."""
    out = np.asarray(a.data[index])

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = np.reshape(g, out.shape)
        return (full,)

    return Tensor._from_op(out.reshape(out.shape or ()), (a,), bw, "select")


# --------------------------------------------------------------------------
# raw kernels


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv2d: output extent ({size}+2*{pad}-{k})/{stride}+1 is not a positive integer"
        )
    return span // stride + 1


_COLS_BUDGET = 1 << 17  # floats per im2col chunk, sized for L2


def _pad_hw(xh: np.ndarray, ph: int, pw: int | None = None) -> np.ndarray:
    """Zero-pad the spatial axes of an NHWC array."""
    pw = ph if pw is None else pw
    if not ph and not pw:
        return np.ascontiguousarray(xh, dtype=DTYPE)
    n, h, w, c = xh.shape
    out = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=DTYPE)
    out[:, ph : ph + h, pw : pw + w] = xh
    return out


def _to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=DTYPE)


def _to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _im2col(xh: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """[N, Hp, Wp, C] -> [N*ho*wo, kh*kw*C], columns ordered (i, j, c)."""
    c = xh.shape[3]
    slices = [xh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] for i in range(kh) for j in range(kw)]
    return np.concatenate(slices, axis=-1).reshape(-1, kh * kw * c)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """[K, C, kh, kw] -> [K, kh*kw*C] matching the im2col column order."""
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1))


def _chunks(n: int, per_sample: int):
    step = max(1, _COLS_BUDGET // max(per_sample, 1))
    return [(lo, min(lo + step, n)) for lo in range(0, n, step)]


def _tiles(n: int, ho: int, per_row: int):
    """(sample lo, hi, row lo, hi) blocks of at most ~_COLS_BUDGET floats."""
    if per_row * ho <= _COLS_BUDGET:
        return [(lo, hi, 0, ho) for lo, hi in _chunks(n, per_row * ho)]
    rows = max(1, _COLS_BUDGET // max(per_row, 1))
    return [(i, i + 1, r, min(r + rows, ho)) for i in range(n) for r in range(0, ho, rows)]


def conv2d_forward_nhwc(xh: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate NHWC ``xh`` with a KCkhkw kernel; output is NHWC."""
    n, h, wd, c = xh.shape
    k, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {c2}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    xp = _pad_hw(xh, pad)
    wm = _kernel_matrix(w).T
    out = np.empty((n, ho, wo, k), dtype=DTYPE)
    for lo, hi, r0, r1 in _tiles(n, ho, wo * kh * kw * c):
        xb = xp[lo:hi, r0 * stride : (r1 - 1) * stride + kh]
        tile = out[lo:hi, r0:r1].reshape(-1, k)
        np.matmul(_im2col(xb, kh, kw, r1 - r0, wo, stride), wm, out=tile)
        if b is not None:
            tile += b
    return out


def conv2d_grad_input_nhwc(g: np.ndarray, w: np.ndarray, input_shape, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Gradient of an NHWC conv2d output with respect to its NHWC input."""
    n, h, wd, c = input_shape
    k, _, kh, kw = w.shape
    _, ho, wo, _ = g.shape
    if stride == 1 and pad <= kh - 1 and pad <= kw - 1:
        # full correlation with the flipped, channel-swapped kernel
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return conv2d_forward_nhwc(_pad_hw(g, kh - 1 - pad, kw - 1 - pad), flipped, None, 1, 0)
    gh = np.ascontiguousarray(g, dtype=DTYPE)
    wm = _kernel_matrix(w)
    gxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=DTYPE)
    for lo, hi in _chunks(n, ho * wo * kh * kw * c):
        dcols = (gh[lo:hi].reshape(-1, k) @ wm).reshape(hi - lo, ho, wo, kh * kw, c)
        for i in range(kh):
            for j in range(kw):
                gxp[lo:hi, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i * kw + j, :]
    return np.ascontiguousarray(gxp[:, pad : pad + h, pad : pad + wd, :])


def conv2d_grad_params_nhwc(g: np.ndarray, xh: np.ndarray, kernel_shape, stride: int = 1, pad: int = 0):
    k, c, kh, kw = kernel_shape
    n = xh.shape[0]
    _, ho, wo, _ = g.shape
    xp = _pad_hw(xh, pad)
    gh = np.ascontiguousarray(g, dtype=DTYPE)
    gm = np.zeros((k, kh * kw * c), dtype=DTYPE)
    for lo, hi, r0, r1 in _tiles(n, ho, wo * kh * kw * c):
        xb = xp[lo:hi, r0 * stride : (r1 - 1) * stride + kh]
        gm += gh[lo:hi, r0:r1].reshape(-1, k).T @ _im2col(xb, kh, kw, r1 - r0, wo, stride)
    gw = np.ascontiguousarray(gm.reshape(k, kh, kw, c).transpose(0, 3, 1, 2))
    gb = gh.reshape(-1, k).sum(axis=0, dtype=np.float64).astype(DTYPE)
    return gw, gb


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate NCHW ``x`` with KCkhkw ``w``."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    return _to_nchw(conv2d_forward_nhwc(_to_nhwc(x), w, b, stride, pad))


def conv2d_grad_input(g: np.ndarray, w: np.ndarray, input_shape, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Gradient of an NCHW conv2d output with respect to its input."""
    n, c, h, wd = input_shape
    return _to_nchw(conv2d_grad_input_nhwc(_to_nhwc(g), w, (n, h, wd, c), stride, pad))


def conv2d_grad_params(g: np.ndarray, x: np.ndarray, kernel_shape, stride: int = 1, pad: int = 0):
    return conv2d_grad_params_nhwc(_to_nhwc(g), _to_nhwc(x), kernel_shape, stride, pad)


_SPATIAL = {"NCHW": (2, 3), "NHWC": (1, 2)}


def _window_view(x: np.ndarray, size: int, di: int, dj: int, layout: str, ho: int, wo: int):
    ia, ib = _SPATIAL[layout]
    idx = [slice(None)] * 4
    idx[ia] = slice(di, ho * size, size)
    idx[ib] = slice(dj, wo * size, size)
    return x[tuple(idx)]


def _pool_masks(x: np.ndarray, size: int, layout: str = "NCHW"):
    """Pooled maxima and one boolean mask per window position marking the
    winner (first maximum in row-major window order)."""
    ia, ib = _SPATIAL[layout]
    ho, wo = x.shape[ia] // size, x.shape[ib] // size
    views = [_window_view(x, size, di, dj, layout, ho, wo) for di in range(size) for dj in range(size)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    masks = []
    taken = np.zeros(out.shape, dtype=bool)
    for v in views:
        hit = v == out
        hit &= ~taken
        taken |= hit
        masks.append(hit)
    return out, masks


def _masks_to_offsets(masks) -> np.ndarray:
    offset = np.zeros(masks[0].shape, dtype=np.int8)
    for k, m in enumerate(masks[1:], start=1):
        offset += np.int8(k) * m
    return offset


def _pool_offsets(x: np.ndarray, size: int, layout: str = "NCHW"):
    """Pooled maxima and the winning window offset (row-major, int8)."""
    out, masks = _pool_masks(x, size, layout)
    return out, _masks_to_offsets(masks)


def _scatter_masks(g: np.ndarray, masks, input_shape, size: int, layout: str = "NCHW") -> np.ndarray:
    ia, ib = _SPATIAL[layout]
    ho, wo = masks[0].shape[ia], masks[0].shape[ib]
    out = np.empty(input_shape, dtype=DTYPE)
    if input_shape[ia] != ho * size or input_shape[ib] != wo * size:
        out.fill(0)  # floor-dropped border rows/cols
    for k, m in enumerate(masks):
        a, b = divmod(k, size)
        np.multiply(g, m, out=_window_view(out, size, a, b, layout, ho, wo))
    return out


def _scatter_offsets(g: np.ndarray, offset: np.ndarray, input_shape, size: int, layout: str = "NCHW") -> np.ndarray:
    masks = [offset == k for k in range(size * size)]
    return _scatter_masks(g, masks, input_shape, size, layout)


def _check_pool(shape, size: int, stride: int, layout: str) -> None:
    if size != stride:
        raise ValueError("maxpool2d: only non-overlapping windows (size == stride) are supported")
    ia, ib = _SPATIAL[layout]
    h, w = shape[ia], shape[ib]
    if h < size or w < size:
        raise ValueError(f"maxpool2d: input {h}x{w} smaller than window {size}")


def maxpool2d_forward(x: np.ndarray, size: int = 2, stride: int = 2):
    """Non-overlapping max pooling with floor semantics.

    Returns the pooled array and the switches: for every output cell the
    flat ``row * W + col`` index of the winning input within its channel
    plane. Ties go to the first element in row-major window order.
    """
    _check_pool(x.shape, size, stride, "NCHW")
    out, offset = _pool_offsets(x, size)
    return out, _offsets_to_switches(offset, x.shape[3], size)


def _offsets_to_switches(offset: np.ndarray, w: int, size: int) -> np.ndarray:
    ho, wo = offset.shape[2:]
    di, dj = np.divmod(offset.astype(np.int64), size)
    base = (np.arange(ho)[:, None] * size) * w + np.arange(wo)[None, :] * size
    return base + di * w + dj


def maxpool2d_scatter(g: np.ndarray, switches: np.ndarray, input_shape, size: int = 2) -> np.ndarray:
    """Route pooled-cell values back to their switch positions (NCHW)."""
    w = input_shape[3]
    ho, wo = switches.shape[2:]
    base = (np.arange(ho)[:, None] * size) * w + np.arange(wo)[None, :] * size
    di, dj = np.divmod(np.asarray(switches) - base, w)
    return _scatter_offsets(g, (di * size + dj).astype(np.int8), input_shape, size)


# --------------------------------------------------------------------------
# differentiable ops


class _LazySwitches:
    """Pool switches materialized only when asked for: flat ``row * W + col``
    indices for NCHW input (``width`` set), raw window offsets otherwise."""

    __slots__ = ("masks", "width", "size", "_flat")

    def __init__(self, masks, width, size):
        self.masks, self.width, self.size, self._flat = masks, width, size, None

    def __array__(self, dtype=None, copy=None):
        if self._flat is None:
            offset = _masks_to_offsets(self.masks)
            self._flat = offset if self.width is None else _offsets_to_switches(offset, self.width, self.size)
        return self._flat if dtype is None else self._flat.astype(dtype)

    def __getitem__(self, idx):
        return np.asarray(self)[idx]

    def item(self):
        return np.asarray(self).item()

    @property
    def shape(self):
        return self.masks[0].shape


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0, layout: str = "NCHW") -> Tensor:
    """2-D convolution; ``layout`` is the activation layout, the kernel is always KCkhkw."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {kernel.shape[0]} filters")
    if layout not in _SPATIAL:
        raise ValueError(f"conv2d: unknown layout {layout!r}")
    nhwc = layout == "NHWC"
    b = None if bias is None else bias.data
    if nhwc:
        out = conv2d_forward_nhwc(x.data, kernel.data, b, stride, pad)
    else:
        out = conv2d_forward(x.data, kernel.data, b, stride, pad)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            if nhwc:
                gx = conv2d_grad_input_nhwc(g, kernel.data, x.shape, stride, pad)
            else:
                gx = conv2d_grad_input(g, kernel.data, x.shape, stride, pad)
        if kernel.requires_grad or (bias is not None and bias.requires_grad):
            if nhwc:
                gw, gb = conv2d_grad_params_nhwc(g, x.data, kernel.shape, stride, pad)
            else:
                gw, gb = conv2d_grad_params(g, x.data, kernel.shape, stride, pad)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor._from_op(out, parents, bw, "conv2d")


def maxpool2d(x: Tensor, size: int = 2, stride: int = 2, layout: str = "NCHW"):
    """Returns the pooled tensor and its switches. For NCHW input the
    switches are flat ``row * W + col`` indices; for NHWC they are the raw
    per-window offsets (``di * size + dj``)."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d: expected 4-D input, got {x.shape}")
    if layout not in _SPATIAL:
        raise ValueError(f"maxpool2d: unknown layout {layout!r}")
    _check_pool(x.shape, size, stride, layout)
    out, masks = _pool_masks(x.data, size, layout)
    res = Tensor._from_op(out, (x,), lambda g: (_scatter_masks(g, masks, x.shape, size, layout),), "maxpool2d")
    return res, _LazySwitches(masks, x.shape[3] if layout == "NCHW" else None, size)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return Tensor._from_op(out, (x,), lambda g: (g * (out > 0),), "relu")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, dtype=np.float64).astype(DTYPE)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, bw, "linear")


def log_softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax computed in float64."""
    return np.exp(log_softmax64(np.asarray(logits)))


def cross_entropy(logits: Tensor, labels: Iterable[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    y = np.asarray(list(labels), dtype=np.int64)
    n, k = logits.shape
    if y.shape != (n,):
        raise ValueError(f"cross_entropy: {len(y)} labels for batch of {n}")
    if ((y < 0) | (y >= k)).any():
        raise ValueError(f"cross_entropy: labels must lie in 0..{k - 1}, got {sorted(set(y.tolist()))}")
    logp = log_softmax64(logits.data)
    loss = -logp[np.arange(n), y].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return ((p * (float(np.asarray(g).reshape(-1)[0]) / n)).astype(DTYPE),)

    return Tensor._from_op(np.asarray(loss, dtype=DTYPE), (logits,), bw, "cross_entropy")


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")


def adam_step(params: dict[str, Tensor], state: AdamState, decay: Iterable[str] = ()) -> None:
    """One Adam update of ``params`` in place from their ``.grad``.

    Parameters named in ``decay`` get ``weight_decay * theta`` added to their
    gradient before the moment updates (L2-coupled decay). Parameters with no
    gradient are treated as having a zero gradient.
    """
    decay = set(decay)
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        if not np.isfinite(g).all():
            raise NumericError(f"adam_step: non-finite gradient for {name!r}")
        if name in decay and state.weight_decay:
            g = g + state.weight_decay * p.data.astype(np.float64)
        grads[name] = g
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=DTYPE)
            v = np.zeros(p.shape, dtype=DTYPE)
        m64 = b1 * m.astype(np.float64) + (1 - b1) * g
        v64 = b2 * v.astype(np.float64) + (1 - b2) * g * g
        m_hat = m64 / (1 - b1**t)
        v_hat = v64 / (1 - b2**t)
        if state.lr:
            p.data = (p.data.astype(np.float64) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(DTYPE)
        state.first_moment[name] = m64.astype(DTYPE)
        state.second_moment[name] = v64.astype(DTYPE)

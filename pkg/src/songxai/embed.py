"""Latent-space analysis: feature extraction, PCA, exact t-SNE and
cluster diagnostics."""

from __future__ import annotations

import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score

from .errors import DataError, NumericError
from .model import Sequential, load_split
from .songgen import DatasetManifest, rng_for
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

EMBED_CSV_HEADER = "sample_id,class,cluster,x,y,method"


@dataclass
class FeatureMatrix:
    values: np.ndarray
    sample_ids: list[str] = field(default_factory=list)
    classes: list[str] = field(default_factory=list)
    clusters: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if np.isnan(self.values).any():
            raise NumericError("feature matrix contains NaN")


@dataclass
class Embedding2D:
    coords: np.ndarray
    method: str
    diagnostics: dict = field(default_factory=dict)
    components: np.ndarray | None = None

    def csv(self, features: FeatureMatrix) -> str:
        buf = io.StringIO()
        buf.write(EMBED_CSV_HEADER + "\n")
        for i, (x, y) in enumerate(self.coords):
            sid = features.sample_ids[i] if features.sample_ids else str(i)
            cls = features.classes[i] if features.classes else ""
            clu = features.clusters[i] if features.clusters else ""
            buf.write(f"{sid},{cls},{clu},{x:.6f},{y:.6f},{self.method}\n")
        return buf.getvalue()


def penultimate_features(model: Sequential, x: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = []
    for lo in range(0, len(x), chunk):
        with no_grad():
            _, cache = model.forward(Tensor(x[lo : lo + chunk]), keep=True)
        out.append(cache["features"].data)
    return np.concatenate(out).astype(np.float64)


def extract_features(model: Sequential | None, manifest: DatasetManifest, split: str | None = "test", background: str = "mixed", layer: str = "penultimate") -> FeatureMatrix:
    """One row per selected record, in manifest order."""
    if layer not in ("penultimate", "raw_pixels"):
        raise ValueError(f"unknown feature layer {layer!r}")
    hw = model.config.input_hw if model is not None and model.config else None
    if split is None:
        parts = [load_split(manifest, s, background, hw) for s in ("train", "test") if manifest.select(s, background)]
        ids = {id(r): i for i, r in enumerate(manifest.samples)}
        x = np.concatenate([p[0] for p in parts])
        recs = [r for p in parts for r in p[2]]
        order = np.argsort([ids[id(r)] for r in recs], kind="stable")
        x, recs = x[order], [recs[i] for i in order]
    else:
        x, _, recs = load_split(manifest, split, background, hw)
    if layer == "raw_pixels":
        values = x.reshape(len(x), -1).astype(np.float64)
    else:
        if model is None:
            raise ValueError("penultimate features need a model")
        values = penultimate_features(model, x)
    return FeatureMatrix(values, [f"{r.id}_{r.background}" for r in recs], [r.cls for r in recs], [r.cluster for r in recs])


def _matrix(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


def pca(x, n_components: int = 2) -> Embedding2D:
    """Principal components by SVD of the centered matrix. Each component
    is signed so its largest-magnitude loading is positive."""
    X = _matrix(x)
    n, d = X.shape
    if n <= n_components:
        raise ValueError(f"pca needs more than {n_components} samples, got {n}")
    var = X.var(axis=0)
    if not (var > 0).any():
        raise DataError(f"zero-variance data: columns {list(range(d))} are all constant")
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:n_components]
    big = np.argmax(np.abs(comps), axis=1)
    comps = comps * np.sign(comps[np.arange(len(comps)), big])[:, None]
    ev = s**2
    ratio = ev[:n_components] / ev.sum()
    coords = Xc @ comps.T
    return Embedding2D(coords, "pca", {"explained_variance_ratio": ratio.tolist()}, comps)


# --------------------------------------------------------------------------
# t-SNE


def _binary_search_p(d2: np.ndarray, perplexity: float, tol: float = 1e-3, max_iter: int = 50):
    """Conditional P rows whose entropy (bits) matches log2(perplexity)."""
    n = d2.shape[0]
    target = np.log2(perplexity)
    P = np.zeros((n, n))
    entropies = np.zeros(n)
    for i in range(n):
        di = np.delete(d2[i], i)
        di = di - di.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            p = np.exp(-di * beta)
            sp = p.sum()
            p = p / sp
            h = -np.sum(p[p > 0] * np.log2(p[p > 0]))
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        entropies[i] = h
        P[i, np.arange(n) != i] = p
    return P, entropies


def _kl(P: np.ndarray, Q: np.ndarray) -> float:
    m = P > 0
    return float(np.sum(P[m] * np.log(P[m] / np.maximum(Q[m], 1e-300))))


def tsne(
    x,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
    learning_rate: float = 200.0,
    exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
) -> Embedding2D:
    """Exact t-SNE with gains, momentum 0.5 then 0.8 and early exaggeration."""
    X = _matrix(x)
    n = X.shape[0]
    if n < 2:
        raise ValueError("t-SNE needs at least 2 samples")
    if n <= 3 * perplexity:
        new = max(1.0, float((n - 1) // 3))
        warnings.warn(f"perplexity {perplexity} too large for {n} samples; using {new}", stacklevel=2)
        perplexity = new
    rng = rng_for(seed, 0x75E)
    d2 = squareform(pdist(X, "sqeuclidean"))
    if (d2[np.triu_indices(n, 1)] == 0).any():
        X = X + 1e-10 * rng.standard_normal(X.shape)
        d2 = squareform(pdist(X, "sqeuclidean"))
    Pc, entropies = _binary_search_p(d2, perplexity)
    P = (Pc + Pc.T) / (2 * n)
    P = np.maximum(P, 1e-12)
    Y = 1e-4 * rng.standard_normal((n, 2))
    upd = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = []
    for it in range(iterations):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        PQ = (exag * P - Q) * num
        grad = 4.0 * (np.diag(PQ.sum(axis=1)) - PQ) @ Y
        if not np.isfinite(grad).all():
            raise NumericError(f"t-SNE diverged at iteration {it}")
        same = np.sign(grad) == np.sign(upd)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        upd = momentum * upd - learning_rate * gains * grad
        Y = Y + upd
        Y = Y - Y.mean(axis=0)
        if (it + 1) % 50 == 0 or it + 1 in (exaggeration_iters, iterations):
            history.append((it + 1, _kl(P, Q)))
    diag = {
        "perplexity": perplexity,
        "kl_history": history,
        "final_kl": history[-1][1] if history else None,
        "entropy_max_error": float(np.abs(entropies - np.log2(perplexity)).max()),
        "seed": seed,
    }
    return Embedding2D(Y, "tsne", diag)


@dataclass
class ClusterDiagnostics:
    labels: np.ndarray
    ari: float | None
    inertia: float


def cluster_diagnostics(e, k: int, planted=None, seed: int = 0) -> ClusterDiagnostics:
    """k-means++ with 20 restarts; ARI against planted ids when given."""
    coords = e.coords if isinstance(e, Embedding2D) else np.asarray(e, dtype=np.float64)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(coords):
        raise ValueError(f"k={k} exceeds the number of points {len(coords)}")
    km = KMeans(n_clusters=k, init="k-means++", n_init=20, random_state=seed).fit(coords)
    ari = None if planted is None else float(adjusted_rand_score(np.asarray(planted), km.labels_))
    return ClusterDiagnostics(km.labels_, ari, float(km.inertia_))


def per_class_ari(e: Embedding2D, features: FeatureMatrix, k: int = 4, seed: int = 0) -> dict[str, float]:
    """Cluster each class's points separately and score against planted ids."""
    out = {}
    classes = np.asarray(features.classes)
    clusters = np.asarray(features.clusters)
    for c in sorted(set(features.classes)):
        sel = classes == c
        out[c] = cluster_diagnostics(e.coords[sel], k, clusters[sel], seed).ari
    return out

"""Command-line pipeline: synth, prep, train, eval, explain, report, embed.

A JSON config file holds every setting; flags override single fields.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dsp import DspConfig, load_spectrogram, read_wav, save_spectrogram, segment_clips, waveform_to_image
from .errors import DataError, NumericError
from .songgen import DatasetManifest, DatasetSpec, generate_dataset

logger = logging.getLogger("songxai")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
BACKGROUND_CONFIGS = ("black", "white", "mixed")
EXPLAIN_METHODS = ("lime", "shap", "gradcam", "deeplift", "ensemble-avg", "ensemble-max")

DEFAULT_CONFIG = {
    "seed": 42,
    "paths": {"data": "data", "checkpoints": "checkpoints", "out": "out"},
    "dsp": {**DspConfig(scale=4).to_dict()},
    "synth": {"per_class": 300, "clusters": 4, "backgrounds": ["black", "white"], "split_fraction": 2 / 3},
    "train": {"lr": 1e-3, "weight_decay": 1e-5, "epochs": 20, "batch_size": 64, "backgrounds": list(BACKGROUND_CONFIGS)},
    "xai": {
        "background": "mixed",
        "lime_samples": 1000,
        "lime_segments": 100,
        "shap_backgrounds": 50,
        "shap_samples": 8,
        "w1": 0.5,
        "w2": 0.5,
        "report_samples": 10,
    },
    "embed": {"layer": "penultimate", "method": "tsne", "perplexity": 30.0, "iterations": 1000, "k": 4, "background": "mixed"},
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        user = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return _merge(DEFAULT_CONFIG, user)


def config_hash(cfg: dict) -> str:
    """Digest of every setting except the directory paths."""
    ident = {k: v for k, v in cfg.items() if k != "paths"}
    blob = json.dumps(ident, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _set(cfg: dict, dotted: str, value) -> None:
    if value is None:
        return
    node = cfg
    *head, last = dotted.split(".")
    for k in head:
        node = node[k]
    node[last] = value


def _write_sidecar(path: Path, cfg: dict, extra: dict | None = None) -> None:
    meta = {"config_hash": config_hash(cfg), **(extra or {})}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _mkdir(p) -> Path:
    p = Path(p)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create directory {p}: {exc}") from None
    return p


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


def _dsp(cfg: dict) -> DspConfig:
    return DspConfig.from_dict(cfg["dsp"])


def _manifest(cfg: dict) -> DatasetManifest:
    path = Path(cfg["paths"]["data"]) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest at {path}; run `songxai synth` first")
    return DatasetManifest.load(path)


def _checkpoint_for(cfg: dict, background: str):
    from .model import checkpoint_path, load_checkpoint

    path = checkpoint_path(cfg["paths"]["checkpoints"], background)
    if not path.exists():
        raise DataError(f"no checkpoint at {path}; run `songxai train` first")
    return load_checkpoint(path)


def _workers() -> int:
    from .songgen import default_workers

    return default_workers()


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, args) -> int:
    s = cfg["synth"]
    spec = DatasetSpec(int(s["per_class"]), int(s["clusters"]), tuple(s["backgrounds"]), float(s["split_fraction"]), int(cfg["seed"]))
    out = _mkdir(cfg["paths"]["data"])
    manifest = generate_dataset(spec, out, _dsp(cfg), workers=_workers())
    _write_sidecar(out / "manifest.json", cfg)
    print(f"wrote {len(manifest.samples)} spectrograms for {len({r.id for r in manifest.samples})} songs to {out}")
    return EXIT_OK


def cmd_prep(cfg: dict, args) -> int:
    dsp = _dsp(cfg)
    out = _mkdir(cfg["paths"]["out"])
    written = 0
    for wav in args.inputs:
        wave = read_wav(wav)
        clips = segment_clips(wave, dsp.clip_seconds)
        if not clips:
            logger.warning("%s is shorter than one %.1f s clip", wav, dsp.clip_seconds)
        for i, clip in enumerate(clips):
            img = waveform_to_image(clip, args.background, dsp)
            png = out / f"{Path(wav).stem}_{i:03d}_{args.background}.png"
            save_spectrogram(img, png, dsp, {"source": str(wav), "clip": i, "config_hash": config_hash(cfg)})
            written += 1
    print(f"wrote {written} spectrograms to {out}")
    return EXIT_OK


def _train_config(cfg: dict):
    from .model import TrainConfig

    t = cfg["train"]
    return TrainConfig(float(t["lr"]), float(t["weight_decay"]), int(t["epochs"]), int(t["batch_size"]), int(cfg["seed"]))


def cmd_train(cfg: dict, args) -> int:
    from .model import METRICS_CSV_HEADER, ModelConfig, build_model, checkpoint_path, evaluate, load_checkpoint, save_checkpoint, train

    manifest = _manifest(cfg)
    tc = _train_config(cfg)
    ckdir = _mkdir(cfg["paths"]["checkpoints"])
    rows = []
    for bg in cfg["train"]["backgrounds"]:
        if bg not in BACKGROUND_CONFIGS:
            raise UsageError(f"unknown background configuration {bg!r}")
        path = checkpoint_path(ckdir, bg)
        if args.resume and path.exists():
            model = load_checkpoint(path)
            logger.info("resuming %s from epoch %s", bg, model.meta.get("epochs_run"))
        else:
            model = build_model(ModelConfig.for_scale(_dsp(cfg).scale), tc.seed)
        model, history = train(model, manifest, tc, bg)
        model.meta["config_hash"] = config_hash(cfg)
        prior = model.meta.get("history", []) if args.resume else []
        model.meta["history"] = prior + [[h.epoch, h.train_loss, h.train_accuracy, h.test_accuracy] for h in history]
        save_checkpoint(model, path)
        metrics = evaluate(model, manifest, "test", bg)
        rows.append(metrics.csv_row(bg))
        print(f"{bg}: test accuracy {metrics.accuracy:.4f}")
    out = _mkdir(cfg["paths"]["out"])
    csv = out / "metrics.csv"
    _write_text(csv, METRICS_CSV_HEADER + "\n" + "\n".join(rows) + "\n")
    _write_sidecar(csv, cfg)
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    from .model import METRICS_CSV_HEADER, evaluate, format_metrics_table

    manifest = _manifest(cfg)
    rows, table = [], []
    for bg in cfg["train"]["backgrounds"]:
        model = _checkpoint_for(cfg, bg)
        m = evaluate(model, manifest, args.split, bg)
        rows.append(m.csv_row(bg))
        table.append((bg, m))
    out = _mkdir(cfg["paths"]["out"])
    csv = out / f"metrics_{args.split}.csv"
    _write_text(csv, METRICS_CSV_HEADER + "\n" + "\n".join(rows) + "\n")
    _write_sidecar(csv, cfg)
    print(format_metrics_table(table))
    return EXIT_OK


def _find_sample(manifest: DatasetManifest, key: str, background: str):
    for rec in manifest.samples:
        if key == f"{rec.id}_{rec.background}" or (key == rec.id and background in ("mixed", rec.background)):
            return rec
    raise DataError(f"sample {key!r} not in manifest")


def explain_one(model, img, method: str, cfg: dict, target=None, backgrounds=None):
    """Saliency map (and constituent maps for ensembles) for one image."""
    from . import ensemble, lime, xai

    x = cfg["xai"]
    if method == "gradcam":
        return xai.gradcam(model, img, target), {}
    if method == "deeplift":
        return xai.deeplift(model, img, target), {}
    if method in ("ensemble-avg", "ensemble-max"):
        cam = xai.gradcam(model, img, target)
        ldf = xai.deeplift(model, img, cam.target_class)
        if method == "ensemble-avg":
            fused = ensemble.fuse_average(cam, ldf, float(x["w1"]), float(x["w2"]))
        else:
            fused = ensemble.fuse_max(cam, ldf)
        return fused, {"gradcam": cam, "deeplift": ldf}
    if method == "lime":
        mask = lime.slic_segment(img, int(x["lime_segments"]))
        exp = lime.lime_explain(model, img, mask, int(x["lime_samples"]), int(cfg["seed"]), target)
        return exp.saliency, {}
    if method == "shap":
        if backgrounds is None or not len(backgrounds):
            raise DataError("shap needs background samples from the training split")
        sc = xai.ShapConfig(int(x["shap_backgrounds"]), int(x["shap_samples"]), int(cfg["seed"]))
        return xai.shap_explain(model, img, backgrounds, sc, target), {}
    raise UsageError(f"unknown method {method!r}; choose from {', '.join(EXPLAIN_METHODS)}")


def _shap_backgrounds(cfg: dict, manifest: DatasetManifest, background: str, hw):
    from .model import load_split

    x, _, _ = load_split(manifest, "train", background, hw)
    from .songgen import rng_for

    n = min(len(x), int(cfg["xai"]["shap_backgrounds"]))
    idx = np.sort(rng_for(int(cfg["seed"]), 0x5B).choice(len(x), n, replace=False))
    return x[idx]


def cmd_explain(cfg: dict, args) -> int:
    from .model import record_image
    from .xai import save_saliency

    if args.method not in EXPLAIN_METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(EXPLAIN_METHODS)}")
    bg = cfg["xai"]["background"]
    model = _checkpoint_for(cfg, bg)
    manifest = None
    if args.input:
        img = load_spectrogram(args.input)
        sid = Path(args.input).stem
    else:
        manifest = _manifest(cfg)
        rec = _find_sample(manifest, args.sample, bg)
        img = record_image(manifest, rec)
        sid = f"{rec.id}_{rec.background}"
    backgrounds = None
    if args.method == "shap":
        manifest = manifest or _manifest(cfg)
        backgrounds = _shap_backgrounds(cfg, manifest, bg, model.config.input_hw)
    smap, parts = explain_one(model, img, args.method, cfg, args.target, backgrounds)
    out = _mkdir(Path(cfg["paths"]["out"]) / "saliency")
    extra = {"config_hash": config_hash(cfg), "sample": sid, "seed": cfg["seed"]}
    name = args.method.replace("-", "_")
    paths = save_saliency(smap, img, out / f"{sid}_{name}", extra)
    for part_name, part in parts.items():
        save_saliency(part, img, out / f"{sid}_{name}_{part_name}", extra)
    print(f"class {smap.target_class}: wrote {paths['overlay']}")
    return EXIT_OK


def _embedding(cfg: dict, manifest, model):
    from . import embed

    e = cfg["embed"]
    feats = embed.extract_features(model, manifest, "test", e["background"], e["layer"])
    if e["method"] == "pca":
        emb = embed.pca(feats)
    else:
        X = feats.values
        if X.shape[1] > 50:
            X = embed.pca(X, min(50, X.shape[0] - 1)).coords
        emb = embed.tsne(X, float(e["perplexity"]), int(e["iterations"]), int(cfg["seed"]))
    aris = embed.per_class_ari(emb, feats, int(e["k"]), int(cfg["seed"]))
    return feats, emb, aris


def cmd_embed(cfg: dict, args) -> int:
    manifest = _manifest(cfg)
    model = _checkpoint_for(cfg, cfg["embed"]["background"]) if cfg["embed"]["layer"] == "penultimate" else None
    feats, emb, aris = _embedding(cfg, manifest, model)
    out = _mkdir(cfg["paths"]["out"])
    csv = out / f"embedding_{emb.method}.csv"
    _write_text(csv, emb.csv(feats))
    _write_sidecar(csv, cfg)
    diag = {**emb.diagnostics, "ari": aris}
    _write_text(out / f"embedding_{emb.method}_diagnostics.json", json.dumps(diag, indent=1, sort_keys=True, default=float) + "\n")
    print(f"{emb.method}: per-class ARI " + ", ".join(f"{k} {v:.3f}" for k, v in aris.items()))
    return EXIT_OK


def cmd_report(cfg: dict, args) -> int:
    from . import ensemble
    from .model import evaluate, format_metrics_table, record_image

    manifest = _manifest(cfg)
    bg = cfg["xai"]["background"]
    model = _checkpoint_for(cfg, bg)
    recs = manifest.select("test", bg)[: int(cfg["xai"]["report_samples"])]
    if not recs:
        raise DataError("no test samples to explain")
    maps = {"gradcam": [], "deeplift": [], "ensemble_avg": [], "ensemble_max": []}
    for rec in recs:
        img = record_image(manifest, rec)
        fused_max, parts = explain_one(model, img, "ensemble-max", cfg)
        maps["gradcam"].append(parts["gradcam"])
        maps["deeplift"].append(parts["deeplift"])
        maps["ensemble_avg"].append(ensemble.fuse_average(parts["gradcam"], parts["deeplift"], float(cfg["xai"]["w1"]), float(cfg["xai"]["w2"])))
        maps["ensemble_max"].append(fused_max)
    report = ensemble.coverage_report(maps)
    out = _mkdir(cfg["paths"]["out"])
    report.write(out / "coverage.csv", out / "coverage.png")
    _write_sidecar(out / "coverage.csv", cfg)
    ids = [f"{r.id}_{r.background}" for r in recs]
    _write_text(out / "coverage_per_sample.csv", report.per_sample_csv(ids))
    _write_sidecar(out / "coverage_per_sample.csv", cfg)

    feats, emb, aris = _embedding(cfg, manifest, model)
    _write_text(out / f"embedding_{emb.method}.csv", emb.csv(feats))
    _write_sidecar(out / f"embedding_{emb.method}.csv", cfg)

    metrics = evaluate(model, manifest, "test", bg)
    order = sorted(report.mean, key=lambda m: -report.mean[m].mean())
    lines = [
        format_metrics_table([(bg, metrics)]),
        "",
        f"explained samples: {len(recs)}",
        "mean coverage ordering (highest first): " + " > ".join(order),
        "max-coverage identity: " + ("holds" if report.identity_holds else f"VIOLATED at {report.violations}"),
        "per-class ARI: " + ", ".join(f"{k} {v:.3f}" for k, v in aris.items()),
        f"config hash: {config_hash(cfg)}",
    ]
    _write_text(out / "summary.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="songxai", description="Spectrogram CNN training and saliency explanations.")
    p.add_argument("--config", help="JSON run config; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="dataset directory (holds manifest.json)")
    p.add_argument("--checkpoints", help="checkpoint directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--scale", type=int, choices=(1, 2, 4), help="image downscale factor")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--per-class", type=int)
    s.add_argument("--clusters", type=int)
    s.add_argument("--backgrounds", nargs="+", choices=("black", "white"))

    s = sub.add_parser("prep", help="render spectrograms from WAV recordings")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--background", choices=("black", "white"), default="black")

    s = sub.add_parser("train", help="train one model per background configuration")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--backgrounds", nargs="+", choices=BACKGROUND_CONFIGS)
    s.add_argument("--resume", action="store_true", help="continue from existing checkpoints")

    s = sub.add_parser("eval", help="metrics table for trained models")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--backgrounds", nargs="+", choices=BACKGROUND_CONFIGS)

    s = sub.add_parser("explain", help="saliency map for one sample")
    s.add_argument("--method", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--sample", help="manifest sample id")
    src.add_argument("--input", help="spectrogram PNG")
    s.add_argument("--class", dest="target", type=int, help="class to explain (default: predicted)")
    s.add_argument("--background", choices=BACKGROUND_CONFIGS, help="which trained model to explain")

    s = sub.add_parser("report", help="coverage curves, embedding and summary")
    s.add_argument("--samples", type=int)
    s.add_argument("--background", choices=BACKGROUND_CONFIGS)

    s = sub.add_parser("embed", help="PCA or t-SNE of model features")
    s.add_argument("--method", choices=("pca", "tsne"))
    s.add_argument("--layer", choices=("penultimate", "raw_pixels"))
    s.add_argument("--background", choices=BACKGROUND_CONFIGS)
    return p


def _apply_flags(cfg: dict, args) -> None:
    _set(cfg, "seed", args.seed)
    _set(cfg, "paths.data", args.data)
    _set(cfg, "paths.checkpoints", args.checkpoints)
    _set(cfg, "paths.out", args.out)
    _set(cfg, "dsp.scale", args.scale)
    g = lambda name: getattr(args, name, None)  # noqa: E731
    _set(cfg, "synth.per_class", g("per_class"))
    _set(cfg, "synth.clusters", g("clusters"))
    if args.command == "synth":
        _set(cfg, "synth.backgrounds", g("backgrounds"))
    else:
        _set(cfg, "train.backgrounds", g("backgrounds"))
    _set(cfg, "train.epochs", g("epochs"))
    _set(cfg, "train.batch_size", g("batch_size"))
    _set(cfg, "train.lr", g("lr"))
    _set(cfg, "xai.report_samples", g("samples"))
    if args.command in ("explain", "report"):
        _set(cfg, "xai.background", g("background"))
    if args.command == "embed":
        _set(cfg, "embed.background", g("background"))
        _set(cfg, "embed.method", g("method"))
        _set(cfg, "embed.layer", g("layer"))


COMMANDS = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "report": cmd_report,
    "embed": cmd_embed,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        _apply_flags(cfg, args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"songxai: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"songxai: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"songxai: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        print(f"songxai: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"songxai: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

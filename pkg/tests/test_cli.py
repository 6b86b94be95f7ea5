import json

import pytest

from songxai.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, config_hash, load_config, main
from songxai.model import load_checkpoint

TINY = {
    "synth": {"per_class": 8, "clusters": 2, "backgrounds": ["black"], "split_fraction": 0.5},
    "train": {"epochs": 1, "batch_size": 8, "backgrounds": ["black"]},
    "xai": {"background": "black", "report_samples": 3, "lime_samples": 60, "lime_segments": 20, "shap_backgrounds": 2, "shap_samples": 2},
    "embed": {"k": 2, "iterations": 300, "perplexity": 2.0, "background": "black"},
}


def run(tmp, *argv):
    base = ["--config", str(tmp / "cfg.json"), "--data", str(tmp / "data"), "--checkpoints", str(tmp / "ck"), "--out", str(tmp / "out")]
    return main(base + list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    (tmp / "cfg.json").write_text(json.dumps(TINY))
    assert run(tmp, "synth") == EXIT_OK
    assert run(tmp, "train") == EXIT_OK
    return tmp


def test_synth_counts_and_determinism(workspace, tmp_path):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert len(manifest["samples"]) == 16
    assert len(list((workspace / "data" / "wav").glob("*.wav"))) == 16
    assert len(list((workspace / "data" / "png").glob("*.png"))) == 16
    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    assert run(tmp_path, "synth") == EXIT_OK
    assert (tmp_path / "data" / "manifest.json").read_bytes() == (workspace / "data" / "manifest.json").read_bytes()


def test_synth_creates_missing_dir(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({**TINY, "synth": {**TINY["synth"], "per_class": 2}}))
    assert main(["--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path / "a" / "b"), "synth"]) == EXIT_OK
    assert (tmp_path / "a" / "b" / "manifest.json").exists()


def test_train_outputs(workspace):
    lines = (workspace / "out" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "background,accuracy,recall,precision,f1" and lines[1].startswith("black,")
    model = load_checkpoint(workspace / "ck" / "model_black.bwxa")
    assert model.meta["config_hash"] == json.loads((workspace / "out" / "metrics.csv.json").read_text())["config_hash"]


def test_epochs_zero_rejected(workspace):
    assert run(workspace, "train", "--epochs", "0") == EXIT_USAGE


def test_missing_manifest(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    assert run(tmp_path, "train") == EXIT_DATA


def test_resume_continues_step_count(workspace, tmp_path):
    import shutil

    shutil.copytree(workspace, tmp_path / "w")
    w = tmp_path / "w"
    before = load_checkpoint(w / "ck" / "model_black.bwxa")
    assert run(w, "train", "--resume") == EXIT_OK
    after = load_checkpoint(w / "ck" / "model_black.bwxa")
    assert after.opt_state.step_count == 2 * before.opt_state.step_count > 0
    assert after.meta["epochs_run"] == 2
    assert [h[0] for h in after.meta["history"]] == [1, 2]


@pytest.mark.parametrize("method", ["gradcam", "deeplift", "ensemble-avg", "ensemble-max", "lime", "shap"])
def test_explain_methods(workspace, method):
    assert run(workspace, "explain", "--method", method, "--sample", "eastern_0000") == EXIT_OK
    stem = f"eastern_0000_black_{method.replace('-', '_')}"
    sal = workspace / "out" / "saliency"
    for suffix in (".bwxa", ".png", ".json"):
        assert (sal / (stem + suffix)).exists()
    assert "config_hash" in json.loads((sal / (stem + ".json")).read_text())


def test_explain_class_flag_and_input(workspace):
    png = next((workspace / "data" / "png").glob("mexican_*.png"))
    assert run(workspace, "explain", "--method", "gradcam", "--input", str(png), "--class", "1") == EXIT_OK
    meta = json.loads((workspace / "out" / "saliency" / f"{png.stem}_gradcam.json").read_text())
    assert meta["target_class"] == 1


def test_unknown_method(workspace):
    assert run(workspace, "explain", "--method", "occlusion", "--sample", "eastern_0000") == EXIT_USAGE


def test_unknown_sample(workspace):
    assert run(workspace, "explain", "--method", "gradcam", "--sample", "nope") == EXIT_DATA


def test_report_and_rerun_identical(workspace):
    assert run(workspace, "report") == EXIT_OK
    out = workspace / "out"
    lines = (out / "coverage.csv").read_text().splitlines()
    assert len(lines) == 1 + 24
    assert "identity: holds" in (out / "summary.txt").read_text()
    first = {p.name: p.read_bytes() for p in out.glob("*.csv")}
    assert run(workspace, "report") == EXIT_OK
    assert {p.name: p.read_bytes() for p in out.glob("*.csv")} == first


def test_embed(workspace):
    assert run(workspace, "embed", "--method", "pca") == EXIT_OK
    lines = (workspace / "out" / "embedding_pca.csv").read_text().splitlines()
    assert lines[0] == "sample_id,class,cluster,x,y,method" and len(lines) == 9


def test_eval(workspace, capsys):
    assert run(workspace, "eval") == EXIT_OK
    assert "Black" in capsys.readouterr().out


def test_config_handling(tmp_path):
    assert config_hash(load_config(None)) == config_hash(load_config(None))
    (tmp_path / "bad.json").write_text(json.dumps({"nonsense": 1}))
    assert main(["--config", str(tmp_path / "bad.json"), "synth"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE

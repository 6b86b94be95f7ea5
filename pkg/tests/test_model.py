import math

import numpy as np
import pytest

from songxai.errors import DataError
from songxai.model import (
    METRICS_CSV_HEADER,
    Metrics,
    ModelConfig,
    TrainConfig,
    as_batch,
    build_model,
    evaluate,
    fit_arrays,
    format_metrics_table,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from songxai.songgen import DatasetSpec, generate_dataset
from songxai.dsp import DspConfig

SMALL = ModelConfig(input_hw=(32, 64))


def layerwise_count(channels, fc, cin, hw):
    """Parameter count from the architecture description alone."""
    conv = 0
    for cout in channels:
        conv += cout * cin * 9 + cout
        cin = cout
    h, w = hw
    for _ in channels:
        h, w = h // 2, w // 2
    fin = channels[-1] * h * w
    dense = 0
    for fout in fc:
        dense += fin * fout + fout
        fin = fout
    return conv, dense


class TestArchitecture:
    def test_canonical_shape_chain(self):
        cfg = ModelConfig.canonical()
        assert cfg.block_shapes() == [(480, 960), (240, 480), (120, 240), (60, 120), (30, 60), (15, 30)]
        assert cfg.flatten_size == 115200

    def test_canonical_parameter_count(self):
        conv, dense = layerwise_count((16, 32, 64, 128, 256), (512, 1024, 2), 1, (480, 960))
        assert (conv, dense) == (392320, 59510274)
        model = build_model(ModelConfig.canonical(), seed=0)
        params = model.parameters()
        assert sum(p.size for n, p in params.items() if n.startswith("conv")) == conv
        assert sum(p.size for n, p in params.items() if n.startswith("fc")) == dense

    def test_desk_scale_floor_pooling(self):
        cfg = ModelConfig()
        assert cfg.block_shapes()[-1] == (3, 7)
        assert cfg.flatten_size == 256 * 21

    def test_strict_rejects_indivisible(self):
        with pytest.raises(ValueError, match="divisible"):
            build_model(ModelConfig(input_hw=(100, 200), strict=True))

    def test_too_small(self):
        with pytest.raises(ValueError):
            build_model(ModelConfig(input_hw=(16, 16)))

    def test_same_seed_same_params(self):
        a, b = build_model(SMALL, 3), build_model(SMALL, 3)
        for (na, pa), (nb, pb) in zip(a.parameters().items(), b.parameters().items()):
            assert na == nb and np.array_equal(pa.data, pb.data)
        c = build_model(SMALL, 4)
        assert not np.array_equal(a.parameters()["conv1.weight"].data, c.parameters()["conv1.weight"].data)

    def test_he_uniform_bounds(self):
        m = build_model(SMALL, 0)
        w = m.parameters()["conv2.weight"].data
        assert np.abs(w).max() <= math.sqrt(6 / (16 * 9))
        assert not m.parameters()["conv2.bias"].data.any()


class TestPredict:
    def test_zero_image_bias_path(self):
        m = build_model(SMALL, 1)
        p = predict(m, np.zeros((32, 64), dtype=np.float32))
        assert np.isfinite(p.logits).all()
        # zero biases and zero input give zero logits
        assert np.array_equal(p.logits, [0.0, 0.0])

    def test_probabilities_and_log_odds(self):
        m = build_model(SMALL, 2)
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = predict(m, rng.random((32, 64), dtype=np.float32))
            assert abs(p.probabilities.sum() - 1) <= 1e-6
            diff = p.logits[0] - p.logits[1]
            assert diff == pytest.approx(math.log(p.probabilities[0] / p.probabilities[1]), abs=1e-5)

    def test_duplicate_identical(self):
        m = build_model(SMALL, 2)
        x = np.random.default_rng(1).random((32, 64), dtype=np.float32)
        assert np.array_equal(predict(m, x).logits, predict(m, x.copy()).logits)

    def test_cache_exposes_taps(self):
        m = build_model(SMALL, 2)
        p = predict(m, np.ones((32, 64), dtype=np.float32))
        assert p.cache["last_conv"].shape == (256, 2, 4)
        assert p.cache["features"].shape == (1024,)
        assert (p.cache["conv1"] >= 0).all()

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="expects"):
            predict(build_model(SMALL, 0), np.zeros((32, 32)))
        with pytest.raises(ValueError):
            as_batch(np.zeros((10, 10)), (20, 20))


def toy_set(n=8, seed=0):
    """Linearly separable: class 0 bright on the left half, class 1 on the right."""
    rng = np.random.default_rng(seed)
    x = 0.1 * rng.random((n, 1, 32, 64), dtype=np.float32)
    y = np.arange(n) % 2
    x[y == 0, :, :, :32] += 0.8
    x[y == 1, :, :, 32:] += 0.8
    return x, y


class TestTraining:
    def test_overfit_toy(self):
        x, y = toy_set()
        m = build_model(SMALL, 0)
        hist = fit_arrays(m, x, y, TrainConfig(epochs=20, batch_size=4, seed=1))
        assert (m.predict_proba(x).argmax(axis=1) == y).mean() == 1.0
        assert hist[0].train_loss <= math.log(2) + 0.2

    def test_zero_lr_without_decay_is_bitwise_noop(self):
        x, y = toy_set()
        m = build_model(SMALL, 0)
        before = {k: p.data.copy() for k, p in m.parameters().items()}
        fit_arrays(m, x, y, TrainConfig(lr=0.0, weight_decay=0.0, epochs=2, batch_size=4))
        for k, p in m.parameters().items():
            assert p.data.tobytes() == before[k].tobytes()

    def test_deterministic_history(self):
        x, y = toy_set()
        runs = []
        for _ in range(2):
            m = build_model(SMALL, 5)
            h = fit_arrays(m, x, y, TrainConfig(epochs=3, batch_size=3, seed=9))
            runs.append(([r.train_loss for r in h], m.parameters()["fc3.weight"].data.copy()))
        assert runs[0][0] == runs[1][0]
        assert np.array_equal(runs[0][1], runs[1][1])

    def test_train_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1)


class TestMetrics:
    def test_symmetric_confusion(self):
        m = Metrics.from_confusion(tp=9, fp=1, fn=1, tn=9)
        assert (m.precision, m.recall, m.f1, m.accuracy) == pytest.approx((0.9, 0.9, 0.9, 0.9))

    def test_perfect(self):
        m = Metrics.from_predictions([0, 1, 0, 1], [0, 1, 0, 1])
        assert (m.accuracy, m.recall, m.precision, m.f1) == (1.0, 1.0, 1.0, 1.0)

    def test_eastern_is_positive(self):
        m = Metrics.from_predictions([0, 0, 1, 1], [0, 1, 1, 1])
        assert m.confusion == [[1, 1], [0, 2]]
        assert m.recall == 0.5 and m.precision == 1.0

    def test_f1_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            t, p = rng.integers(0, 2, 40), rng.integers(0, 2, 40)
            m = Metrics.from_predictions(t, p)
            if m.precision + m.recall:
                assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))
            assert m.accuracy == pytest.approx((t == p).mean())

    def test_table_printer_fixture(self):
        # reference row: 94.83% / 0.9452 / 0.9839 / 0.9642
        row = Metrics(0.9483, 0.9452, 0.9839, 0.9642, [[0, 0], [0, 0]])
        table = format_metrics_table([("mixed", row)])
        assert "Mixed" in table and "94.83%" in table
        assert "0.9452" in table and "0.9839" in table and "0.9642" in table
        assert row.csv_row("mixed") == "mixed,0.948300,0.945200,0.983900,0.964200"
        assert METRICS_CSV_HEADER == "background,accuracy,recall,precision,f1"


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    spec = DatasetSpec(per_class=6, clusters_per_class=2, backgrounds=("black",), split_fraction=0.5, seed=11)
    return generate_dataset(spec, root, DspConfig(scale=4))


class TestManifestTraining:
    def test_train_and_evaluate_order_invariant(self, tiny_dataset):
        m = build_model(ModelConfig(), 0)
        m, hist = train(m, tiny_dataset, TrainConfig(epochs=1, batch_size=6), "black")
        assert len(hist) == 1 and hist[0].test_accuracy is not None
        assert m.meta["epochs_run"] == 1
        a = evaluate(m, tiny_dataset, "test", "black")
        tiny_dataset.samples.reverse()
        try:
            b = evaluate(m, tiny_dataset, "test", "black")
        finally:
            tiny_dataset.samples.reverse()
        assert a == b

    def test_empty_split(self, tiny_dataset):
        with pytest.raises(DataError):
            train(build_model(ModelConfig(), 0), tiny_dataset, TrainConfig(epochs=1), "white")

    def test_unreadable_png_before_first_step(self, tiny_dataset, tmp_path):
        import copy
        import shutil

        root = tmp_path / "copy"
        shutil.copytree(tiny_dataset.root, root)
        man = copy.deepcopy(tiny_dataset)
        man.root = root
        (root / man.samples[-1].png).write_bytes(b"garbage")
        m = build_model(ModelConfig(), 0)
        before = m.parameters()["conv1.weight"].data.copy()
        with pytest.raises(DataError):
            train(m, man, TrainConfig(epochs=1), "black")
        assert np.array_equal(before, m.parameters()["conv1.weight"].data)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        x, y = toy_set()
        m = build_model(SMALL, 0)
        fit_arrays(m, x, y, TrainConfig(epochs=1, batch_size=4))
        m.meta = {"epochs_run": 1, "final_loss": 0.5, "seed": 42}
        save_checkpoint(m, tmp_path / "m.bwxa")
        back = load_checkpoint(tmp_path / "m.bwxa")
        probe = np.random.default_rng(0).random((10, 1, 32, 64), dtype=np.float32)
        assert m.logits(probe).tobytes() == back.logits(probe).tobytes()
        assert back.meta == m.meta
        assert back.opt_state.step_count == m.opt_state.step_count

    def test_truncated(self, tmp_path):
        m = build_model(SMALL, 0)
        p = tmp_path / "m.bwxa"
        save_checkpoint(m, p)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) - 100])
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(p)

    def test_version_bump_rejected(self, tmp_path):
        import struct

        m = build_model(SMALL, 0)
        p = tmp_path / "m.bwxa"
        save_checkpoint(m, p)
        data = bytearray(p.read_bytes())
        data[4:6] = struct.pack("<H", 2)
        p.write_bytes(bytes(data))
        with pytest.raises(DataError, match="version 2"):
            load_checkpoint(p)

    def test_shape_mismatch(self, tmp_path):
        from songxai import tensorio

        m = build_model(SMALL, 0)
        p = tmp_path / "m.bwxa"
        save_checkpoint(m, p)
        header, tensors = tensorio.load(p)
        tensors["fc3.bias"] = np.zeros(3, dtype=np.float32)
        tensorio.save(p, tensors, {k: v for k, v in header.items() if k != "tensors"})
        with pytest.raises(DataError, match="fc3.bias"):
            load_checkpoint(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bwxa"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(p)

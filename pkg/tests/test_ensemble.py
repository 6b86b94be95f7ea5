import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from songxai.ensemble import (
    COVERAGE_CSV_HEADER,
    THRESHOLDS,
    EnsembleConfig,
    coverage_report,
    fuse,
    fuse_average,
    fuse_max,
    threshold_coverage,
)
from songxai.errors import DataError
from songxai.xai import SaliencyMap, normalize_minmax

unit_maps = arrays(np.float64, (6, 7), elements=st.floats(0, 1))


def random_pair(rng, shape=(12, 20)):
    return normalize_minmax(rng.random(shape) ** 3), normalize_minmax(rng.random(shape))


class TestFuse:
    def test_examples(self):
        a, b = np.array([[0.3]]), np.array([[0.7]])
        assert fuse_average(a, b).values[0, 0] == pytest.approx(0.5)
        assert fuse_max(a, b).values[0, 0] == 0.7

    def test_average_equals_arithmetic_mean_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a, b = random_pair(rng)
            assert np.array_equal(fuse_average(a, b).values, (a + b) / 2)

    def test_projection_and_idempotence(self):
        a, b = random_pair(np.random.default_rng(1))
        assert np.array_equal(fuse_average(a, b, 1.0, 0.0).values, a)
        np.testing.assert_allclose(fuse_average(a, a).values, a)
        assert np.array_equal(fuse_max(a, a).values, a)

    @given(unit_maps, unit_maps)
    def test_max_dominates_mean(self, a, b):
        assert (fuse_max(a, b).values >= fuse_average(a, b).values).all()

    def test_max_keeps_endpoints(self):
        a, b = random_pair(np.random.default_rng(2))
        assert fuse_max(a, b).values.max() == max(a.max(), b.max())
        a.flat[0] = b.flat[0] = 0.0
        assert fuse_max(a, b).values.min() == 0.0

    def test_labels_and_target(self):
        a = SaliencyMap(np.zeros((2, 2)), "gradcam", 1)
        b = SaliencyMap(np.ones((2, 2)) * 0.5, "deeplift", 1)
        assert fuse_average(a, b).method == "ensemble_avg"
        m = fuse_max(a, b)
        assert m.method == "ensemble_max" and m.target_class == 1
        assert fuse(a, b, EnsembleConfig(strategy="max")).method == "ensemble_max"

    def test_renormalize_flag(self):
        a, b = np.full((2, 2), 0.2), np.array([[0.2, 0.4], [0.2, 0.2]])
        assert fuse_max(a, b).values.max() == 0.4
        assert fuse_max(a, b, renormalize=True).values.max() == pytest.approx(1.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            fuse_average(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            fuse_max(np.zeros((2, 2)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            fuse_average(np.zeros((2, 2)), np.zeros((2, 2)), -0.1, 1.1)
        with pytest.raises(ValueError):
            EnsembleConfig(strategy="median")


class TestCoverage:
    def test_thirds(self):
        h = np.repeat([[0.0, 0.5, 1.0]], 4, axis=0)
        c = threshold_coverage(h, [0.4])
        assert c.fraction_above[0] == pytest.approx(2 / 3)

    def test_strict_inequality(self):
        h = np.random.default_rng(0).random((5, 5))
        h[0, 0] = 1.0
        assert threshold_coverage(h, [1.0]).fraction_above[0] == 0.0
        assert threshold_coverage(np.full((3, 3), 0.5), [0.5]).fraction_above[0] == 0.0

    def test_zero_map(self):
        assert not threshold_coverage(np.zeros((4, 4))).fraction_above.any()

    def test_unsorted_thresholds_sorted(self):
        h = np.random.default_rng(1).random((8, 8))
        c = threshold_coverage(h, [0.9, 0.4, 0.6])
        np.testing.assert_array_equal(c.thresholds, [0.4, 0.6, 0.9])
        for t, f in zip(c.thresholds, c.fraction_above):
            assert f == np.mean(h > t)

    @given(unit_maps)
    def test_monotone(self, h):
        f = threshold_coverage(h, np.linspace(0, 1, 11)).fraction_above
        assert (np.diff(f) <= 0).all()

    def test_max_identity_on_random_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a, b = random_pair(rng)
            cm = threshold_coverage(fuse_max(a, b)).fraction_above
            ca, cb = threshold_coverage(a).fraction_above, threshold_coverage(b).fraction_above
            assert (cm >= np.maximum(ca, cb)).all()


class TestReport:
    def maps(self, n, seed=0):
        rng = np.random.default_rng(seed)
        out = {"gradcam": [], "deeplift": [], "ensemble_avg": [], "ensemble_max": []}
        for _ in range(n):
            a, b = random_pair(rng)
            out["gradcam"].append(a)
            out["deeplift"].append(b)
            out["ensemble_avg"].append(fuse_average(a, b))
            out["ensemble_max"].append(fuse_max(a, b))
        return out

    def test_arity_and_identity(self):
        rep = coverage_report(self.maps(10))
        lines = rep.csv().splitlines()
        assert lines[0] == COVERAGE_CSV_HEADER and len(lines) == 1 + 24
        assert lines[1].split(",")[1] == "0.4"
        assert rep.identity_holds

    def test_single_sample_equals_curve(self):
        m = self.maps(1)
        rep = coverage_report(m)
        np.testing.assert_array_equal(rep.mean["gradcam"], threshold_coverage(m["gradcam"][0]).fraction_above)

    def test_duplicate_samples_same_mean(self):
        m = self.maps(1)
        rep = coverage_report({k: v * 2 for k, v in m.items()})
        np.testing.assert_allclose(rep.mean["deeplift"], threshold_coverage(m["deeplift"][0]).fraction_above)

    def test_violation_detected(self):
        m = self.maps(2)
        m["ensemble_max"][1] = np.zeros((12, 20))
        rep = coverage_report(m)
        assert not rep.identity_holds and {i for i, _ in rep.violations} == {1}

    def test_per_sample_csv(self):
        rep = coverage_report(self.maps(3))
        lines = rep.per_sample_csv(["a", "b", "c"]).splitlines()
        assert len(lines) == 1 + 4 * 3 * len(THRESHOLDS)
        assert lines[1].startswith("a,gradcam,0.4,")

    def test_errors(self):
        with pytest.raises(DataError):
            coverage_report({"gradcam": []})
        with pytest.raises(ValueError):
            coverage_report({"gradcam": [np.zeros((2, 2)), np.zeros((3, 2))]})

    def test_write_with_plot(self, tmp_path):
        rep = coverage_report(self.maps(2))
        rep.write(tmp_path / "c.csv", tmp_path / "c.png")
        assert (tmp_path / "c.csv").read_text() == rep.csv()
        assert (tmp_path / "c.png").read_bytes()[:4] == b"\x89PNG"

import csv

import numpy as np
import pytest

from gazelab.diagnostics import (DiagnosticsReport, angle_variance_ratios, compute_diagnostics,
                                 export_angle_scatter, feature_angles, feature_norms, rav, rnv)
from gazelab.errors import DataError, NumericalGuardError


def oracle_angles(features, weights):
    """Row-by-row dot-product implementation."""
    out = np.zeros((len(features), len(weights)))
    for i, h in enumerate(features):
        for j, w in enumerate(weights):
            cos = float(h @ w) / (np.linalg.norm(h) * np.linalg.norm(w))
            out[i, j] = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return out


class TestFeatureAngles:
    def test_parallel_is_zero(self):
        w = np.array([[1.0, 2.0, 3.0]])
        assert feature_angles(np.array([[2.0, 4.0, 6.0]]), w)[0, 0] == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal_is_ninety(self):
        w = np.array([[1.0, 0.0]])
        assert feature_angles(np.array([[0.0, 5.0]]), w)[0, 0] == pytest.approx(90.0, abs=1e-9)

    def test_matches_oracle(self, rng):
        features = rng.random((3, 4))
        weights = rng.standard_normal((2, 4))
        assert np.allclose(feature_angles(features, weights), oracle_angles(features, weights),
                           rtol=1e-12, atol=1e-12)

    def test_zero_norm_feature_names_row(self, rng):
        features = rng.random((3, 4))
        features[1] = 0.0
        with pytest.raises(NumericalGuardError, match="row 1"):
            feature_angles(features, rng.random((2, 4)))

    def test_scale_invariance(self, rng):
        features = rng.random((5, 4)) + 0.1
        weights = rng.random((2, 4)) + 0.1
        base = feature_angles(features, weights)
        assert np.allclose(feature_angles(3.7 * features, weights), base, atol=1e-9)
        assert np.allclose(feature_angles(features, 0.21 * weights), base, atol=1e-9)


class TestRNV:
    def test_identical_sets(self, rng):
        norms = rng.random(10) + 0.5
        assert rnv(norms, norms) == pytest.approx(1.0, rel=1e-12)

    def test_constant_poisoned(self, rng):
        assert rnv(np.full(8, 3.3), rng.random(8) + 0.5) == 0.0

    def test_zero_benign_variance_guard(self, rng):
        with pytest.raises(NumericalGuardError):
            rnv(rng.random(5), np.full(5, 2.0))

    def test_population_variance_convention(self):
        # var([1, 3]) = 1 with divide-by-N; ratio of var([0,4])=4 over it is 4
        assert rnv(np.array([0.0, 4.0]), np.array([1.0, 3.0])) == pytest.approx(4.0, rel=1e-12)


class TestRAV:
    def test_identical_matrices(self, rng):
        angles = rng.random((6, 2)) * 90
        assert rav(angles, angles) == pytest.approx(1.0, rel=1e-12)

    def test_constant_poisoned_angles(self, rng):
        assert rav(np.full((6, 2), 45.0), rng.random((6, 2)) * 90) == 0.0

    def test_mean_of_per_dimension_ratios(self, rng):
        p = rng.random((8, 3)) * 90
        b = rng.random((8, 3)) * 90
        ratios = np.var(p, axis=0) / np.var(b, axis=0)
        assert rav(p, b) == pytest.approx(float(np.mean(ratios)), rel=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DataError):
            rav(rng.random((4, 2)), rng.random((4, 3)))

    def test_zero_benign_variance_names_dimension(self, rng):
        benign = rng.random((5, 2)) * 90
        benign[:, 1] = 10.0
        with pytest.raises(NumericalGuardError, match="dimension 1"):
            rav(rng.random((5, 2)), benign)


class TestScaleInvariance:
    def test_joint_rescaling_leaves_metrics_unchanged(self, rng):
        feats_p = rng.random((8, 5)) + 0.1
        feats_b = rng.random((8, 5)) + 0.1
        weights = rng.standard_normal((2, 5))
        scale = 2.43
        rav_base = rav(feature_angles(feats_p, weights), feature_angles(feats_b, weights))
        rav_scaled = rav(feature_angles(scale * feats_p, weights),
                         feature_angles(scale * feats_b, weights))
        assert rav_scaled == pytest.approx(rav_base, rel=1e-9)
        rnv_base = rnv(feature_norms(feats_p), feature_norms(feats_b))
        rnv_scaled = rnv(feature_norms(scale * feats_p), feature_norms(scale * feats_b))
        assert rnv_scaled == pytest.approx(rnv_base, rel=1e-9)


class TestComputeDiagnostics:
    def test_report_consistency(self, micro_model, tiny_split, rng):
        benign = np.stack([s.image for s in tiny_split.test])
        poisoned = np.clip(benign + 0.05 * rng.random(benign.shape).astype(np.float32), 0, 1)
        report = compute_diagnostics(micro_model, benign, poisoned)
        assert report.rav == pytest.approx(float(np.mean(report.angle_variance_ratios)), rel=1e-9)
        assert report.rnv == pytest.approx(report.poisoned_norm_variance / report.benign_norm_variance,
                                           rel=1e-9)
        assert len(report.angle_variance_ratios) == 2
        blob = report.to_dict()
        assert set(blob) == {"rnv", "rav", "poisoned_norm_variance", "benign_norm_variance",
                             "angle_variance_ratios"}


class TestScatterExport:
    def test_rows_and_header(self, rng, tmp_path):
        p = rng.random((5, 2)) * 90
        b = rng.random((7, 2)) * 90
        path = export_angle_scatter(p, b, tmp_path / "scatter.csv")
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["series", "alpha_1", "alpha_2"]
        assert len(rows) == 1 + 5 + 7
        assert sum(1 for r in rows[1:] if r[0] == "poisoned") == 5

    def test_deterministic(self, rng, tmp_path):
        p = rng.random((3, 2))
        b = rng.random((3, 2))
        a1 = export_angle_scatter(p, b, tmp_path / "a.csv").read_text()
        a2 = export_angle_scatter(p, b, tmp_path / "b.csv").read_text()
        assert a1 == a2

    def test_wrong_dimension_rejected(self, rng, tmp_path):
        with pytest.raises(DataError):
            export_angle_scatter(rng.random((3, 3)), rng.random((3, 3)), tmp_path / "x.csv")

    def test_plot_file_written(self, rng, tmp_path):
        p = rng.random((4, 2)) * 90
        b = rng.random((4, 2)) * 90
        export_angle_scatter(p, b, tmp_path / "s.csv", plot_path=tmp_path / "s.png")
        assert (tmp_path / "s.png").stat().st_size > 0

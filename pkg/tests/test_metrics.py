import math

import numpy as np
import pytest

from morphlabel.errors import EmptyGroundTruth, EmptyMask, ShapeMismatch
from morphlabel.metrics import (
    MetricsRecord,
    aggregate_folds,
    boundary_pixels,
    dsc,
    evaluate_volumes,
    hausdorff,
    sensitivity,
    volume_metrics,
)


def brute_force_hausdorff(a, b):
    """All-pairs oracle over boundary pixel sets."""
    pa = boundary_pixels(a).astype(np.float64)
    pb = boundary_pixels(b).astype(np.float64)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def random_mask(rng, side=32):
    m = np.zeros((side, side), dtype=np.uint8)
    n_blobs = int(rng.integers(1, 4))
    for _ in range(n_blobs):
        r, c = rng.integers(4, side - 4, size=2)
        rad = int(rng.integers(2, 6))
        yy, xx = np.ogrid[:side, :side]
        m |= ((yy - r) ** 2 + (xx - c) ** 2 <= rad * rad).astype(np.uint8)
    return m


class TestDsc:
    def test_identical(self):
        m = random_mask(np.random.default_rng(0))
        assert dsc(m, m) == 100.0

    def test_disjoint(self):
        a = np.zeros((8, 8)); a[:2, :2] = 1
        b = np.zeros((8, 8)); b[6:, 6:] = 1
        assert dsc(a, b) == 0.0

    def test_half(self):
        a = np.zeros((8, 8)); a[0, :4] = 1
        b = np.zeros((8, 8)); b[0, 2:6] = 1
        assert dsc(a, b) == 50.0

    def test_both_empty(self):
        assert dsc(np.zeros((4, 4)), np.zeros((4, 4))) == 100.0

    def test_symmetry_and_identity_property(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = random_mask(rng), random_mask(rng)
            assert dsc(a, b) == dsc(b, a)
            if a.any():
                assert (dsc(a, b) == 100.0) == np.array_equal(a != 0, b != 0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dsc(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSensitivity:
    def test_superset_prediction(self):
        g = np.zeros((8, 8)); g[2:4, 2:4] = 1
        p = np.ones((8, 8))
        assert sensitivity(p, g) == 100.0

    def test_disjoint(self):
        g = np.zeros((8, 8)); g[:2, :2] = 1
        p = np.zeros((8, 8)); p[6:, 6:] = 1
        assert sensitivity(p, g) == 0.0

    def test_seventy_percent(self):
        g = np.zeros((10, 10)); g[0] = 1  # 10 px
        p = np.zeros((10, 10)); p[0, :7] = 1
        assert sensitivity(p, g) == 70.0

    def test_empty_gt(self):
        with pytest.raises(EmptyGroundTruth):
            sensitivity(np.ones((4, 4)), np.zeros((4, 4)))


class TestHausdorff:
    def test_identical_zero(self):
        m = random_mask(np.random.default_rng(2))
        assert hausdorff(m, m) == 0.0

    def test_three_four_five(self):
        a = np.zeros((8, 8)); a[0, 0] = 1
        b = np.zeros((8, 8)); b[4, 3] = 1  # displaced by (3, 4)
        assert hausdorff(a, b) == 5.0

    def test_empty_raises(self):
        with pytest.raises(EmptyMask):
            hausdorff(np.zeros((4, 4)), np.ones((4, 4)))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force_exactly(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_mask(rng), random_mask(rng)
        assert hausdorff(a, b) == brute_force_hausdorff(a, b)

    def test_symmetry_and_triangle_inequality(self):
        rng = np.random.default_rng(33)
        for _ in range(5):
            a, b, c = (random_mask(rng) for _ in range(3))
            hab, hbc, hac = hausdorff(a, b), hausdorff(b, c), hausdorff(a, c)
            assert hab == hausdorff(b, a)
            assert hac <= hab + hbc + 1e-9


class TestAggregation:
    def test_perfect_predictions(self):
        vols = []
        rng = np.random.default_rng(4)
        for _ in range(3):
            gt = [random_mask(rng) for _ in range(4)]
            vols.append((gt, [g.copy() for g in gt]))
        rec = evaluate_volumes(vols)
        s = rec.summary()
        assert s["dsc_mean"] == 100.0 and s["dsc_std"] == 0.0
        assert s["hd_mean"] == 0.0 and s["hd_std"] == 0.0

    def test_fold_mean_and_sample_std(self):
        recs = []
        for v in (80.0, 85.0, 90.0):
            r = MetricsRecord(dsc_values=[v], sen_values=[v], hd_values=[1.0])
            recs.append(r)
        agg = aggregate_folds(recs)
        assert agg["dsc_mean"] == 85.0
        assert abs(agg["dsc_std"] - 5.0) < 1e-12  # ddof=1 per documented convention

    def test_volume_empty_pred_contributes_diagonal(self):
        gt = [random_mask(np.random.default_rng(5))]
        pred = [np.zeros_like(gt[0])]
        m = volume_metrics(pred, gt)
        assert m["hd"] == pytest.approx(math.hypot(31, 31))

    def test_formatted_table_shape(self):
        rec = MetricsRecord(
            dsc_values=[85.0, 86.0], sen_values=[88.0, 90.0], hd_values=[10.0, 11.0]
        )
        fmt = rec.formatted()
        assert set(fmt) == {"DSC", "SEN", "HD"}
        assert "±" in fmt["DSC"]

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fppn.metrics import MetricReport, compare, evaluate, mean_report


class TestEvaluate:
    def test_perfect_prediction_is_zero(self):
        gt = np.full((4, 4), 5.0)
        r = evaluate(gt.copy(), gt)
        assert r.rmse == 0 and r.mae == 0 and r.irmse == 0 and r.imae == 0
        assert r.valid_pixel_count == 16

    def test_units_are_millimeters(self):
        # constant 2 m error -> RMSE = MAE = 2000 mm
        gt = np.full((3, 3), 4.0)
        r = evaluate(gt + 2.0, gt)
        assert r.rmse == pytest.approx(2000.0)
        assert r.mae == pytest.approx(2000.0)

    def test_hand_case(self):
        # residuals 1 m and -2 m over two valid pixels:
        # RMSE = sqrt((1^2 + 2^2)/2) * 1000 = 1581.1388 mm
        # inverse residuals: 1/3-1/2 = -1/6, 1/2-1/4 = 1/4 (1/m -> *1000 1/km)
        # iMAE = (1/6 + 1/4)/2 * 1000 = 208.333 1/km
        gt = np.array([[2.0, 4.0, 0.0]])
        pred = np.array([[3.0, 2.0, 99.0]])
        r = evaluate(pred, gt)
        assert r.rmse == pytest.approx(1581.1388, abs=0.01)
        assert r.mae == pytest.approx(1500.0)
        assert r.imae == pytest.approx(208.3333, abs=0.01)
        assert r.irmse == pytest.approx(np.sqrt((1000 / 6) ** 2 + 250**2) / np.sqrt(2), abs=0.01)
        assert r.valid_pixel_count == 2

    def test_invalid_gt_pixels_ignored(self):
        gt = np.array([[2.0, 0.0]])
        a = evaluate(np.array([[2.5, 1.0]]), gt)
        b = evaluate(np.array([[2.5, 77.0]]), gt)
        assert a == b

    def test_no_valid_pixels_rejected(self):
        with pytest.raises(ValueError, match="valid"):
            evaluate(np.ones((2, 2)), np.zeros((2, 2)))

    def test_nonpositive_prediction_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            evaluate(np.array([[0.0]]), np.array([[1.0]]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            evaluate(np.ones((2, 2)), np.ones((2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_rmse_at_least_mae(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(1, 20, (6, 6))
        pred = gt + rng.normal(0, 1, gt.shape)
        pred = np.clip(pred, 0.1, None)
        r = evaluate(pred, gt)
        assert r.rmse >= r.mae - 1e-9
        assert r.irmse >= r.imae - 1e-9

    def test_fixing_one_pixel_never_hurts(self):
        rng = np.random.default_rng(7)
        gt = rng.uniform(1, 10, (5, 5))
        pred = np.clip(gt + rng.normal(0, 2, gt.shape), 0.5, None)
        before = evaluate(pred, gt)
        fixed = pred.copy()
        fixed[2, 2] = gt[2, 2]
        after = evaluate(fixed, gt)
        assert after.rmse <= before.rmse and after.mae <= before.mae
        assert after.irmse <= before.irmse and after.imae <= before.imae


class TestMeanReport:
    def test_single_report_identity(self):
        r = evaluate(np.full((2, 2), 3.0), np.full((2, 2), 2.0))
        assert mean_report([r]) == r

    def test_count_weighting_matches_pooled_pixels(self):
        rng = np.random.default_rng(0)
        gt1 = rng.uniform(1, 9, (3, 5))
        gt2 = rng.uniform(1, 9, (7, 4))
        p1 = np.clip(gt1 + rng.normal(0, 1, gt1.shape), 0.2, None)
        p2 = np.clip(gt2 + rng.normal(0, 1, gt2.shape), 0.2, None)
        merged = mean_report([evaluate(p1, gt1), evaluate(p2, gt2)])
        pooled = evaluate(np.concatenate([p1.ravel(), p2.ravel()])[None],
                          np.concatenate([gt1.ravel(), gt2.ravel()])[None])
        assert merged.rmse == pytest.approx(pooled.rmse, rel=1e-12)
        assert merged.mae == pytest.approx(pooled.mae, rel=1e-12)
        assert merged.valid_pixel_count == pooled.valid_pixel_count

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_report([])


def _rep(rmse, mae, irmse=1.0, imae=1.0, n=100):
    return MetricReport(rmse, mae, irmse, imae, n)


class TestCompare:
    # published KITTI depth-completion leaderboard-style numbers, typed in as
    # plain inputs; the tooling must rank them by RMSE ascending
    TABLE = [
        ("ours", _rep(1214.96, 518.34, 3.99, 1.86)),
        ("sparse-to-dense", _rep(1299.85, 350.32, 4.07, 1.57)),
        ("interp-baseline", _rep(2655.82, 1431.31, 15.09, 7.75)),
        ("conv-spatial-prop", _rep(1019.64, 279.46, 2.93, 1.15)),
    ]

    def test_ranking_order(self):
        csv = compare(self.TABLE)
        names = [line.split(",")[0] for line in csv.strip().splitlines()[1:]]
        assert names == ["conv-spatial-prop", "ours", "sparse-to-dense", "interp-baseline"]

    def test_values_survive_into_csv(self):
        csv = compare(self.TABLE)
        assert "ours,1214.96,518.34" in csv

    def test_header(self):
        csv = compare(self.TABLE)
        assert csv.splitlines()[0] == "name,rmse_mm,mae_mm,irmse_1perkm,imae_1perkm,valid_pixels"

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        shuffled = list(self.TABLE)
        rng.shuffle(shuffled)
        assert compare(shuffled) == compare(self.TABLE)

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            compare([("a", _rep(1, 1)), ("a", _rep(2, 2))])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compare([])

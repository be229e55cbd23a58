import numpy as np
import pytest

from fppn.flowwarp import warp_depth, warp_rgb
from fppn.synthscene import Rect, SceneSpec, covisible_mask, render


def oracle_warp_depth(src, flow):
    """Exhaustive per-pixel nearest-neighbor oracle."""
    h, w = src.shape
    out = np.zeros_like(src)
    mask = np.zeros((h, w), dtype=bool)
    for v in range(h):
        for u in range(w):
            su = u + flow[v, u, 0]
            sv = v + flow[v, u, 1]
            sui = int(np.floor(abs(su) + 0.5) * np.sign(su))
            svi = int(np.floor(abs(sv) + 0.5) * np.sign(sv))
            if 0 <= sui < w and 0 <= svi < h and src[svi, sui] > 0:
                out[v, u] = src[svi, sui]
                mask[v, u] = True
    return out, mask


def oracle_warp_bilinear(src, flow):
    h, w = src.shape[:2]
    out = np.zeros_like(src)
    mask = np.zeros((h, w), dtype=bool)
    for v in range(h):
        for u in range(w):
            su = u + float(flow[v, u, 0])
            sv = v + float(flow[v, u, 1])
            if 0 <= su <= w - 1 and 0 <= sv <= h - 1:
                u0, v0 = min(int(np.floor(su)), w - 2), min(int(np.floor(sv)), h - 2)
                fu, fv = su - u0, sv - v0
                out[v, u] = (src[v0, u0] * (1 - fu) * (1 - fv) + src[v0, u0 + 1] * fu * (1 - fv)
                             + src[v0 + 1, u0] * (1 - fu) * fv + src[v0 + 1, u0 + 1] * fu * fv)
                mask[v, u] = True
    return out, mask


class TestWarpDepth:
    def test_zero_flow_identity(self):
        rng = np.random.default_rng(0)
        src = np.where(rng.random((8, 8)) < 0.5, rng.uniform(1, 10, (8, 8)), 0.0)
        res = warp_depth(src, np.zeros((8, 8, 2), dtype=np.float32))
        np.testing.assert_array_equal(res.values, src)
        np.testing.assert_array_equal(res.mask, src > 0)

    def test_uniform_shift_hand_case(self):
        src = np.zeros((10, 10))
        src[5, 5] = 10.0  # (row 5, col 5)
        flow = np.zeros((10, 10, 2), dtype=np.float32)
        flow[..., 0] = 1.0  # sample one column to the right
        res = warp_depth(src, flow)
        assert res.values[5, 4] == 10.0
        assert res.mask.sum() == 1 and res.mask[5, 4]

    def test_all_out_of_bounds(self):
        src = np.full((4, 4), 5.0)
        flow = np.full((4, 4, 2), 100.0, dtype=np.float32)
        res = warp_depth(src, flow)
        assert not res.mask.any()
        assert np.all(res.values == 0)

    def test_resolution_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            warp_depth(np.zeros((4, 4)), np.zeros((5, 4, 2), dtype=np.float32))

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(4, 33, size=2)
        src = np.where(rng.random((h, w)) < 0.3, rng.uniform(1, 20, (h, w)), 0.0)
        flow = rng.normal(0, 3, size=(h, w, 2)).astype(np.float32)
        res = warp_depth(src, flow)
        ov, om = oracle_warp_depth(src, flow)
        np.testing.assert_array_equal(res.values, ov)
        np.testing.assert_array_equal(res.mask, om)

    def test_validity_subset_of_inbounds_and_source_valid(self):
        rng = np.random.default_rng(11)
        src = np.where(rng.random((16, 16)) < 0.4, rng.uniform(1, 9, (16, 16)), 0.0)
        flow = rng.normal(0, 4, size=(16, 16, 2)).astype(np.float32)
        res = warp_depth(src, flow)
        assert np.all(res.values[res.mask] > 0)
        assert np.all(res.values[~res.mask] == 0)


class TestWarpRgb:
    def test_zero_flow_identity(self):
        img = np.random.default_rng(1).random((6, 6, 3))
        res = warp_rgb(img, np.zeros((6, 6, 2), dtype=np.float32))
        np.testing.assert_allclose(res.values, img, atol=1e-15)
        assert res.mask.all()

    def test_half_pixel_shift_on_ramp(self):
        # horizontal ramp with slope 0.1 per column
        img = np.tile(np.arange(8) * 0.1, (4, 1))
        flow = np.zeros((4, 8, 2), dtype=np.float32)
        flow[..., 0] = 0.5
        res = warp_rgb(img, flow)
        np.testing.assert_allclose(res.values[:, :7], img[:, :7] + 0.05, atol=1e-7)

    def test_constant_image_constant_output(self):
        img = np.full((6, 6, 3), 0.42)
        flow = np.random.default_rng(2).uniform(-1.5, 1.5, size=(6, 6, 2)).astype(np.float32)
        res = warp_rgb(img, flow)
        inb = res.mask
        assert np.allclose(res.values[inb], 0.42, atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_bilinear_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        h, w = rng.integers(4, 33, size=2)
        img = rng.random((h, w))
        flow = rng.normal(0, 2, size=(h, w, 2)).astype(np.float32)
        res = warp_rgb(img, flow)
        ov, om = oracle_warp_bilinear(img, flow)
        np.testing.assert_array_equal(res.mask, om)
        np.testing.assert_allclose(res.values, ov, atol=1e-12)


class TestSceneConsistency:
    def test_warping_truth_with_exact_flow_reconstructs_truth(self):
        spec = SceneSpec(rects=(
            Rect(depth=3.0, size=(20, 16), pos=(10.0, 8.0), velocity=(3.0, 2.0), acceleration=(1.0, 0.0)),
            Rect(depth=5.0, size=(14, 22), pos=(30.0, 30.0), velocity=(-2.0, 1.0)),
        ), seed=9)
        s = render(spec)
        for flow, frame in ((s.flow_t, 1), (s.flow_tm1, 0)):
            res = warp_depth(s.dense_depth[frame], flow)
            co = covisible_mask(s, flow, frame)
            assert co.sum() > 0.5 * co.size
            np.testing.assert_allclose(res.values[co], s.gt[co], atol=1e-9)

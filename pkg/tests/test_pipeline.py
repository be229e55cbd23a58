import numpy as np
import pytest

from fppn.dataio import Sample
from fppn.network import PredictionNetConfig, RefineNetConfig, masked_l2
from fppn.pipeline import (EdgeParams, assemble_planes, evaluate_model, flip_planes,
                           nearest_fill, predict_sample, warp_fill_baseline)
from fppn.synthscene import Rect, SceneSpec, render
from fppn.tensor import Tensor
from fppn.train import build_model

MICRO_PRED = PredictionNetConfig(base_channels=4, encoder_stages=2, decoder_deconvs=2)
MICRO_REF = RefineNetConfig(stride2_layers=2, widths=(8, 8, 8, 8, 8))


def scene_sample(seed=0, h=16, w=16):
    spec = SceneSpec(width=w, height=h, rects=(
        Rect(depth=4.0, size=(6, 6), pos=(4.0, 3.0), velocity=(1.0, 1.0)),
    ), sparsity=0.3, seed=seed)
    s = render(spec)
    return Sample(s.rgb[0], s.rgb[1], s.rgb[2], s.sparse[0], s.sparse[1],
                  s.flow_t, s.flow_tm1, s.gt, s.intrinsics)


class TestAssemblePlanes:
    def test_full_config_planes(self):
        planes = assemble_planes(scene_sample(), PredictionNetConfig())
        assert set(planes) == {"d_t", "flow", "d_warp_t", "d_warp_tm1", "d_agg", "edges"}
        for p in planes.values():
            assert p.shape[0] == 1 and p.shape[2:] == (16, 16)

    def test_disabled_toggles_skip_planes(self):
        cfg = PredictionNetConfig(use_aggregation=False, use_edges=False,
                                  include_second_warp=False)
        planes = assemble_planes(scene_sample(), cfg)
        assert set(planes) == {"d_t", "flow", "d_warp_t"}

    def test_toggle_does_not_change_upstream_planes(self):
        s = scene_sample()
        on = assemble_planes(s, PredictionNetConfig())
        off = assemble_planes(s, PredictionNetConfig(use_edges=False))
        for name in off:
            assert on[name].tobytes() == off[name].tobytes()

    def test_edge_params_reach_canny(self):
        s = scene_sample()
        loose = assemble_planes(s, PredictionNetConfig(), EdgeParams(low=0.01, high=0.02))
        tight = assemble_planes(s, PredictionNetConfig(), EdgeParams(low=0.3, high=0.6))
        assert loose["edges"].sum() >= tight["edges"].sum()


class TestFlipPlanes:
    def test_involution(self):
        planes = assemble_planes(scene_sample(), PredictionNetConfig())
        twice = flip_planes(flip_planes(planes))
        for name in planes:
            np.testing.assert_array_equal(twice[name], planes[name])

    def test_flow_dv_negated(self):
        planes = assemble_planes(scene_sample(), PredictionNetConfig())
        f = flip_planes(planes)
        np.testing.assert_array_equal(f["flow"][:, 0], planes["flow"][:, 0, ::-1])
        np.testing.assert_array_equal(f["flow"][:, 1], -planes["flow"][:, 1, ::-1])

    def test_flip_matches_flipped_scene_assembly(self):
        """Assembling planes from a vertically flipped scene equals flipping
        the planes of the original scene (up to the canny border rows)."""
        s = scene_sample(seed=4)
        flipped_sample = Sample(
            s.rgb_tm1[::-1].copy(), s.rgb_t[::-1].copy(), s.rgb_tp1[::-1].copy(),
            s.depth_tm1[::-1].copy(), s.depth_t[::-1].copy(),
            np.stack([s.flow_t[::-1, :, 0], -s.flow_t[::-1, :, 1]], axis=-1),
            np.stack([s.flow_tm1[::-1, :, 0], -s.flow_tm1[::-1, :, 1]], axis=-1),
            s.gt[::-1].copy(), s.intrinsics)
        cfg = PredictionNetConfig()
        direct = assemble_planes(flipped_sample, cfg)
        via_flip = flip_planes(assemble_planes(s, cfg))
        for name in direct:
            np.testing.assert_allclose(direct[name], via_flip[name], atol=1e-12)

    def test_masked_loss_flip_invariance(self):
        rng = np.random.default_rng(0)
        pred = rng.uniform(1, 5, (1, 1, 8, 8))
        gt = np.where(rng.random((8, 8)) < 0.5, rng.uniform(1, 5, (8, 8)), 0.0)
        a = masked_l2(Tensor(pred), gt).data
        b = masked_l2(Tensor(pred[:, :, ::-1].copy()), gt[::-1].copy()).data
        assert a == pytest.approx(b, rel=1e-12)


class TestPredictAndEvaluate:
    def test_predict_sample_shapes(self):
        _, pred_net, ref_net = build_model(MICRO_PRED, MICRO_REF, seed=0)
        s = scene_sample()
        coarse, refined = predict_sample(pred_net, ref_net, s)
        assert coarse.shape == refined.shape == (16, 16)
        assert np.all(coarse > 0) and np.all(refined > 0)

    def test_predict_without_refinement(self):
        _, pred_net, _ = build_model(MICRO_PRED, MICRO_REF, seed=0)
        coarse, refined = predict_sample(pred_net, None, scene_sample())
        assert refined is None and coarse.shape == (16, 16)

    def test_evaluate_model_runs(self):
        _, pred_net, ref_net = build_model(MICRO_PRED, MICRO_REF, seed=0)
        samples = [scene_sample(seed=i) for i in range(3)]
        rep = evaluate_model(pred_net, ref_net, samples)
        assert rep.rmse > 0
        assert rep.valid_pixel_count == 3 * 16 * 16


class TestNearestFill:
    def test_single_seed_floods_everything(self):
        sparse = np.zeros((5, 5))
        sparse[2, 2] = 7.0
        assert np.all(nearest_fill(sparse) == 7.0)

    def test_valid_pixels_untouched(self):
        rng = np.random.default_rng(1)
        sparse = np.where(rng.random((10, 10)) < 0.2, rng.uniform(1, 9, (10, 10)), 0.0)
        filled = nearest_fill(sparse)
        hit = sparse > 0
        np.testing.assert_array_equal(filled[hit], sparse[hit])
        if hit.any():
            assert np.all(filled > 0)

    def test_fill_values_come_from_valid_set(self):
        sparse = np.zeros((6, 6))
        sparse[0, 0] = 2.0
        sparse[5, 5] = 9.0
        filled = nearest_fill(sparse)
        assert set(np.unique(filled)) == {2.0, 9.0}

    def test_all_invalid_unchanged(self):
        assert np.all(nearest_fill(np.zeros((4, 4))) == 0)


class TestWarpFillBaseline:
    def test_dense_positive_output(self):
        out = warp_fill_baseline(scene_sample())
        assert out.shape == (16, 16)
        assert np.all(out > 0)

    def test_static_scene_baseline_is_accurate(self):
        # no motion, exact flow: warped depths equal the truth where sampled
        spec = SceneSpec(width=16, height=16,
                         rects=(Rect(depth=4.0, size=(6, 6), pos=(4.0, 3.0)),),
                         sparsity=0.5, seed=2)
        s = render(spec)
        sample = Sample(s.rgb[0], s.rgb[1], s.rgb[2], s.sparse[0], s.sparse[1],
                        s.flow_t, s.flow_tm1, s.gt, s.intrinsics)
        out = warp_fill_baseline(sample)
        covered = (s.sparse[0] > 0) | (s.sparse[1] > 0)
        np.testing.assert_allclose(out[covered], s.gt[covered], atol=1e-9)

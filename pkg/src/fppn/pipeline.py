"""End-to-end glue: network-input assembly, prediction, baselines.

The assembly step turns one loaded Sample into the named input planes the
prediction network consumes: the current sparse depth, the backward flow,
the warped depth candidates, their adaptive aggregation, and the edge map of
the future frame. Planes are (1, C, H, W) float64.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import edgefeat
from .aggregate import aggregate_depth, cosine_weights
from .dataio import Sample
from .flowwarp import warp_depth, warp_rgb
from .network import PredictionNet, PredictionNetConfig, RefineNet


@dataclass(frozen=True)
class EdgeParams:
    sigma: float = edgefeat.DEFAULT_SIGMA
    low: float = edgefeat.DEFAULT_LOW
    high: float = edgefeat.DEFAULT_HIGH


def assemble_planes(sample: Sample, cfg: PredictionNetConfig, edge_params: EdgeParams = EdgeParams()) -> dict:
    """Compute the input planes the configured network expects.

    Stages downstream of a disabled toggle are skipped entirely, so enabling
    a toggle cannot change upstream outputs.
    """
    w_t = warp_depth(sample.depth_t, sample.flow_t)
    w_tm1 = warp_depth(sample.depth_tm1, sample.flow_tm1)
    planes = {
        "d_t": sample.depth_t[None, None],
        "flow": np.ascontiguousarray(sample.flow_t.astype(np.float64).transpose(2, 0, 1)[None]),
        "d_warp_t": w_t.values[None, None],
    }
    if cfg.include_second_warp:
        planes["d_warp_tm1"] = w_tm1.values[None, None]
    if cfg.use_aggregation:
        i_w_t = warp_rgb(sample.rgb_t, sample.flow_t)
        i_w_tm1 = warp_rgb(sample.rgb_tm1, sample.flow_tm1)
        weights = cosine_weights(i_w_tm1, i_w_t, sample.rgb_tp1)
        planes["d_agg"] = aggregate_depth(weights, w_tm1, w_t)[None, None]
    if cfg.use_edges:
        planes["edges"] = edgefeat.canny(sample.rgb_tp1, edge_params.sigma,
                                         edge_params.low, edge_params.high)[None, None]
    return planes


def flip_planes(planes: dict) -> dict:
    """Vertical flip of assembled planes; the flow's dv channel changes sign."""
    out = {}
    for name, p in planes.items():
        f = p[:, :, ::-1].copy()
        if name == "flow":
            f[:, 1] = -f[:, 1]
        out[name] = f
    return out


def predict_sample(pred_net: PredictionNet, ref_net: RefineNet | None, sample: Sample,
                   edge_params: EdgeParams = EdgeParams(), mode: str = "eval"):
    """Run the full forward pipeline; returns (coarse, refined|None) 2D maps."""
    planes = assemble_planes(sample, pred_net.cfg, edge_params)
    coarse_t = pred_net.forward(planes, mode=mode)
    coarse = coarse_t.data[0, 0]
    if ref_net is None:
        return coarse, None
    refined = ref_net.forward(coarse_t, sample.rgb_tp1, mode=mode).data[0, 0]
    return coarse, refined


def evaluate_model(pred_net: PredictionNet, ref_net, samples,
                   edge_params: EdgeParams = EdgeParams(), use_refined: bool = True):
    """Mean metric report of the model over loaded samples (eval mode)."""
    from .metrics import evaluate, mean_report

    reports = []
    for s in samples:
        coarse, refined = predict_sample(pred_net, ref_net, s, edge_params)
        out = refined if (use_refined and refined is not None) else coarse
        reports.append(evaluate(out, s.gt))
    return mean_report(reports)


def nearest_fill(sparse: np.ndarray) -> np.ndarray:
    """Fill invalid pixels with the nearest valid depth (4-neighbor BFS).

    The non-learned reference: a dense map from the sparse one with no
    learning at all. Fully invalid input is returned unchanged.
    """
    out = sparse.copy()
    h, w = out.shape
    valid = out > 0
    if valid.all() or not valid.any():
        return out
    queue = deque(zip(*np.nonzero(valid)))
    while queue:
        i, j = queue.popleft()
        for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if 0 <= ni < h and 0 <= nj < w and out[ni, nj] == 0:
                out[ni, nj] = out[i, j]
                queue.append((ni, nj))
    return out


def warp_fill_baseline(sample: Sample) -> np.ndarray:
    """Aggregated warped depth with nearest-valid fill (no learned parts)."""
    w_t = warp_depth(sample.depth_t, sample.flow_t)
    w_tm1 = warp_depth(sample.depth_tm1, sample.flow_tm1)
    i_w_t = warp_rgb(sample.rgb_t, sample.flow_t)
    i_w_tm1 = warp_rgb(sample.rgb_tm1, sample.flow_tm1)
    weights = cosine_weights(i_w_tm1, i_w_t, sample.rgb_tp1)
    return nearest_fill(aggregate_depth(weights, w_tm1, w_t))

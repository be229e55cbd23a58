"""Depth evaluation metrics over valid ground-truth pixels.

RMSE/MAE are reported in millimeters, iRMSE/iMAE on inverse depth in 1/km,
matching depth-completion leaderboard conventions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricReport:
    rmse: float  # mm
    mae: float  # mm
    irmse: float  # 1/km
    imae: float  # 1/km
    valid_pixel_count: int

    def row(self):
        return f"{self.rmse:.2f},{self.mae:.2f},{self.irmse:.2f},{self.imae:.2f},{self.valid_pixel_count}"


def evaluate(pred: np.ndarray, gt: np.ndarray) -> MetricReport:
    """Compute RMSE/MAE/iRMSE/iMAE at pixels where gt > 0."""
    if pred.shape != gt.shape:
        raise ValueError(f"resolution mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = gt > 0
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid ground-truth pixels; metrics undefined")
    p = pred[valid]
    g = gt[valid]
    if np.any(p <= 0):
        raise ValueError("prediction must be strictly positive at valid pixels")
    res_mm = (p - g) * 1000.0
    inv_res_km = (1.0 / p - 1.0 / g) * 1000.0  # 1/m -> 1/km
    return MetricReport(
        rmse=float(np.sqrt(np.mean(res_mm**2))),
        mae=float(np.mean(np.abs(res_mm))),
        irmse=float(np.sqrt(np.mean(inv_res_km**2))),
        imae=float(np.mean(np.abs(inv_res_km))),
        valid_pixel_count=n,
    )


def mean_report(reports) -> MetricReport:
    """Pixel-count-weighted mean of several per-sample reports (RMS for the RMS metrics)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    n = sum(r.valid_pixel_count for r in reports)
    w = np.array([r.valid_pixel_count / n for r in reports])
    return MetricReport(
        rmse=float(np.sqrt(sum(wi * r.rmse**2 for wi, r in zip(w, reports)))),
        mae=float(sum(wi * r.mae for wi, r in zip(w, reports))),
        irmse=float(np.sqrt(sum(wi * r.irmse**2 for wi, r in zip(w, reports)))),
        imae=float(sum(wi * r.imae for wi, r in zip(w, reports))),
        valid_pixel_count=n,
    )


def compare(reports) -> str:
    """Rank (name, MetricReport) pairs by RMSE ascending; returns CSV text."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to compare")
    names = [name for name, _ in reports]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate entry names: {sorted(names)}")
    ranked = sorted(reports, key=lambda nr: nr[1].rmse)
    lines = ["name,rmse_mm,mae_mm,irmse_1perkm,imae_1perkm,valid_pixels"]
    lines += [f"{name},{r.row()}" for name, r in ranked]
    return "\n".join(lines) + "\n"

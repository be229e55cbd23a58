"""Dense depth map -> 3D point cloud via the pinhole camera model, PLY export.

Pixel coordinates are integer pixel centers (u = column, v = row) with no
half-pixel offset. Points are in camera coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import CameraIntrinsics


@dataclass(frozen=True)
class PointCloud:
    xyz: np.ndarray  # (N, 3) meters, camera frame, z > 0
    intensity: np.ndarray | None = None  # (N,) uint8 grayscale, optional

    def __len__(self):
        return self.xyz.shape[0]

    def bounding_box(self):
        if len(self) == 0:
            return None
        return self.xyz.min(axis=0), self.xyz.max(axis=0)


def backproject(depth: np.ndarray, k: CameraIntrinsics, rgb: np.ndarray | None = None) -> PointCloud:
    """Lift every valid (depth > 0) pixel to a 3D point.

    z = d(u,v); x = (u - c_U) * z / f_U; y = (v - c_V) * z / f_V.
    `rgb` optionally supplies per-point grayscale intensity.
    """
    if np.any(depth < 0):
        raise ValueError("depth map contains negative values at pixels flagged valid")
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w]
    valid = depth > 0
    z = depth[valid]
    x = (u[valid] - k.c_u) * z / k.f_u
    y = (v[valid] - k.c_v) * z / k.f_v
    intensity = None
    if rgb is not None:
        gray = rgb[valid] @ np.array([0.299, 0.587, 0.114])
        intensity = np.clip(np.round(gray * 255.0), 0, 255).astype(np.uint8)
    return PointCloud(np.stack([x, y, z], axis=1), intensity)


def project(point, k: CameraIntrinsics):
    """Inverse mapping: 3D camera-frame point -> (u, v, d)."""
    x, y, z = point
    if z <= 0:
        raise ValueError(f"cannot project point with z = {z} <= 0")
    return x * k.f_u / z + k.c_u, y * k.f_v / z + k.c_v, z


def export_ply(cloud: PointCloud, path):
    """Write a binary little-endian PLY (float32 x/y/z, optional uchar intensity)."""
    path = Path(path)
    if not np.all(np.isfinite(cloud.xyz)):
        raise ValueError("point cloud has non-finite coordinates")
    n = len(cloud)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if cloud.intensity is not None:
        header.append("property uchar intensity")
    header.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            xyz = np.ascontiguousarray(cloud.xyz, dtype="<f4")
            if cloud.intensity is None:
                fh.write(xyz.tobytes())
            else:
                for i in range(n):
                    fh.write(struct.pack("<fffB", *xyz[i], int(cloud.intensity[i])))
    except OSError as exc:
        raise OSError(f"failed writing PLY to {path}: {exc}") from exc


def summarize(cloud: PointCloud) -> str:
    bb = cloud.bounding_box()
    if bb is None:
        return "0 points"
    lo, hi = bb
    return (f"{len(cloud)} points, bbox x [{lo[0]:.3f}, {hi[0]:.3f}] "
            f"y [{lo[1]:.3f}, {hi[1]:.3f}] z [{lo[2]:.3f}, {hi[2]:.3f}]")

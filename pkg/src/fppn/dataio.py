"""Codecs and loaders: depth PNGs, flow files, calibration, sample manifests.

Grid conventions: all rasters are numpy arrays indexed [row, col] (v, u).
Sparse/dense depth maps are float64 meters with 0.0 meaning "no measurement".
RGB images are (H, W, 3) floats in [0, 1]. Flow fields are (H, W, 2) float32
(du, dv) in pixels, backward convention: the value stored at a target pixel p
points to the source location p + F(p).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class DecodeError(ValueError):
    """Raised when a file does not match its expected encoding."""


# raw uint16 / 256 -> meters; largest representable depth
DEPTH_SCALE = 256.0
MAX_DEPTH_M = 65535 / DEPTH_SCALE

FLOW_TAG = b"PIEH"


@dataclass(frozen=True)
class CameraIntrinsics:
    f_u: float
    f_v: float
    c_u: float
    c_v: float

    def __post_init__(self):
        if self.f_u <= 0 or self.f_v <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.f_u}, {self.f_v})")

    def shifted(self, du: float, dv: float) -> "CameraIntrinsics":
        """Intrinsics after removing `du` columns from the left and `dv` rows from the top."""
        return CameraIntrinsics(self.f_u, self.f_v, self.c_u - du, self.c_v - dv)


def validity(depth: np.ndarray) -> np.ndarray:
    return depth > 0


# ---------------------------------------------------------------------------
# Depth PNG codec (uint16 grayscale, raw / 256 = meters, 0 = invalid)


def decode_depth_png(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data))
    if img.mode not in ("I", "I;16", "I;16B"):
        raise DecodeError(f"depth PNG must be 16-bit single channel, got mode {img.mode!r}")
    raw = np.asarray(img, dtype=np.uint32)
    if raw.ndim != 2:
        raise DecodeError(f"depth PNG must be single channel, got shape {raw.shape}")
    return raw.astype(np.float64) / DEPTH_SCALE


def encode_depth_png(depth: np.ndarray) -> bytes:
    if depth.ndim != 2:
        raise DecodeError(f"depth grid must be 2D, got shape {depth.shape}")
    if np.any(depth < 0):
        raise DecodeError("negative depth is not encodable")
    raw = np.round(depth * DEPTH_SCALE)
    if raw.max(initial=0) > 65535:
        raise DecodeError(f"depth {depth.max():.2f} m exceeds the format ceiling {MAX_DEPTH_M:.2f} m")
    img = Image.fromarray(raw.astype(np.uint16))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# RGB codec (plain 8-bit PNG, normalized to [0,1] on load)


def decode_rgb_png(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data)).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def encode_rgb_png(rgb: np.ndarray) -> bytes:
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DecodeError(f"RGB image must be (H,W,3), got {rgb.shape}")
    img = Image.fromarray(np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Flow codec ("PIEH" tag, u32 width/height, interleaved float32 du,dv)


def decode_flow(data: bytes) -> np.ndarray:
    if data[:4] != FLOW_TAG:
        raise DecodeError(f"bad flow tag {data[:4]!r}, expected {FLOW_TAG!r}")
    if len(data) < 12:
        raise DecodeError("flow header truncated")
    w, h = struct.unpack("<ii", data[4:12])
    need = 12 + 8 * w * h
    if len(data) < need:
        raise DecodeError(f"flow payload truncated: have {len(data)} bytes, need {need}")
    flow = np.frombuffer(data[12:need], dtype="<f4").reshape(h, w, 2).copy()
    return flow


def encode_flow(flow: np.ndarray) -> bytes:
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DecodeError(f"flow field must be (H,W,2), got {flow.shape}")
    h, w = flow.shape[:2]
    return FLOW_TAG + struct.pack("<ii", w, h) + np.ascontiguousarray(flow, dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# Cropping


def crop_top(grid: np.ndarray, target_w: int = 1216, target_h: int = 256) -> np.ndarray:
    """Crop to target size keeping the BOTTOM rows, centered horizontally.

    The discarded region is the top of the frame, where LiDAR returns are
    sparse. Returns a view.
    """
    h, w = grid.shape[:2]
    if h < target_h or w < target_w:
        raise DecodeError(f"source {w}x{h} smaller than crop target {target_w}x{target_h}")
    row0 = h - target_h
    col0 = (w - target_w) // 2
    return grid[row0 : row0 + target_h, col0 : col0 + target_w]


def crop_offsets(src_h: int, src_w: int, target_w: int = 1216, target_h: int = 256):
    """(col_offset, row_offset) that crop_top applies for this source size."""
    return (src_w - target_w) // 2, src_h - target_h


# ---------------------------------------------------------------------------
# Calibration + manifest


def load_intrinsics(path) -> CameraIntrinsics:
    """Parse a calibration file: one `fu fv cu cv` line per camera (first used)."""
    line = Path(path).read_text().strip().splitlines()[0]
    vals = [float(t) for t in line.split()]
    if len(vals) != 4:
        raise DecodeError(f"{path}: expected 4 values `fu fv cu cv`, got {len(vals)}")
    return CameraIntrinsics(*vals)


def save_intrinsics(path, k: CameraIntrinsics):
    Path(path).write_text(f"{k.f_u!r} {k.f_v!r} {k.c_u!r} {k.c_v!r}\n")


@dataclass(frozen=True)
class Sample:
    """One fully loaded, consistently sized input tuple."""

    rgb_tm1: np.ndarray
    rgb_t: np.ndarray
    rgb_tp1: np.ndarray
    depth_tm1: np.ndarray
    depth_t: np.ndarray
    flow_t: np.ndarray  # F_{t+1 -> t}
    flow_tm1: np.ndarray  # F_{t+1 -> t-1}
    gt: np.ndarray
    intrinsics: CameraIntrinsics

    @property
    def height(self):
        return self.gt.shape[0]

    @property
    def width(self):
        return self.gt.shape[1]


# manifest line: I_{t-1} I_t I_{t+1} d_{t-1} d_t F_{t+1->t} F_{t+1->t-1} gt intrinsics
_FIELDS = 9


class SampleIndex:
    """Immutable list of samples, each a 9-tuple of file paths."""

    def __init__(self, rows, root: Path):
        self.rows = tuple(tuple(r) for r in rows)
        self.root = Path(root)
        for r in self.rows:
            if len(r) != _FIELDS:
                raise DecodeError(f"manifest row has {len(r)} fields, expected {_FIELDS}")

    def __len__(self):
        return len(self.rows)

    @classmethod
    def load(cls, manifest_path) -> "SampleIndex":
        manifest_path = Path(manifest_path)
        rows = []
        for line in manifest_path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append(line.split())
        return cls(rows, manifest_path.parent)

    def paths(self, i):
        return [self.root / p for p in self.rows[i]]


def load_sample(index: SampleIndex, i: int, crop: tuple | None = None) -> Sample:
    """Load and validate sample `i`; optionally crop all grids to (w, h).

    Cropping shifts the principal point by the crop offsets so back-projection
    of a cropped pixel matches the corresponding pre-crop pixel.
    """
    if not 0 <= i < len(index):
        raise IndexError(f"sample index {i} out of range [0, {len(index)})")
    p = index.paths(i)
    rgbs = [decode_rgb_png(p[j].read_bytes()) for j in range(3)]
    depths = [decode_depth_png(p[j].read_bytes()) for j in (3, 4)]
    flows = [decode_flow(p[j].read_bytes()) for j in (5, 6)]
    gt = decode_depth_png(p[7].read_bytes())
    k = load_intrinsics(p[8])

    grids = rgbs + depths + flows + [gt]
    if crop is not None:
        tw, th = crop
        du, dv = crop_offsets(gt.shape[0], gt.shape[1], tw, th)
        grids = [crop_top(g, tw, th) for g in grids]
        k = k.shifted(du, dv)

    shapes = {g.shape[:2] for g in grids}
    if len(shapes) != 1:
        raise DecodeError(f"sample {i}: resolution mismatch across modalities: {sorted(shapes)}")
    return Sample(*grids[:3], *grids[3:5], *grids[5:7], grids[7], k)

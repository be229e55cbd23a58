"""Synthetic moving-scene generator: the desk-scale dataset and test oracle.

Scenes are textured rectangles at distinct constant depths translating over a
static textured background. Rendering produces RGB triplets, sparse depth
maps, exact backward flows, dense ground truth, and (for tests) object-id
maps from which co-visibility can be derived exactly.

Rectangle positions follow constant acceleration: offsets 0, v, 2v + a at
frames t-1, t, t+1, so two-frame constant-velocity extrapolation diverges
from the truth exactly when a != 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import CameraIntrinsics


@dataclass(frozen=True)
class Rect:
    depth: float  # meters, constant over the rectangle
    size: tuple  # (h, w) pixels
    pos: tuple  # (row, col) of the top-left corner at frame t-1
    velocity: tuple = (0.0, 0.0)  # (du, dv) px/frame
    acceleration: tuple = (0.0, 0.0)  # (du, dv) px/frame^2

    def offset(self, frame: int):
        """Translation at frame index 0..2 (t-1, t, t+1)."""
        du, dv = self.velocity
        au, av = self.acceleration
        if frame == 0:
            return 0.0, 0.0
        if frame == 1:
            return du, dv
        return 2 * du + au, 2 * dv + av


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 64
    background_depth: float = 12.0
    rects: tuple = ()
    sparsity: float = 0.08
    flow_noise_sigma: float = 1.5
    seed: int = 0
    focal: float = 80.0

    def __post_init__(self):
        if not 0 < self.sparsity <= 1:
            raise ValueError(f"sparsity must be in (0, 1], got {self.sparsity}")
        for r in self.rects:
            if r.depth >= self.background_depth:
                raise ValueError(f"rectangle depth {r.depth} must be < background depth {self.background_depth}")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.width / 2.0, self.height / 2.0)


@dataclass(frozen=True)
class RenderedSample:
    rgb: tuple  # three (H,W,3) frames
    dense_depth: tuple  # three (H,W) dense truth maps
    sparse: tuple  # (d_{t-1}, d_t) random-masked truth
    flow_t: np.ndarray  # exact F_{t+1->t}
    flow_tm1: np.ndarray  # exact F_{t+1->t-1}
    gt: np.ndarray  # dense truth at t+1 (== dense_depth[2])
    ids: tuple  # three (H,W) int object-id maps (0 = background)
    intrinsics: CameraIntrinsics


def _smooth_noise(rng, h, w, cell=8, amp=0.06):
    """Low-frequency per-channel texture variation via bilinear upsampling."""
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.uniform(-amp, amp, size=(gh, gw, 3))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    return (coarse[y0][:, x0] * (1 - fy) * (1 - fx)
            + coarse[y0][:, x0 + 1] * (1 - fy) * fx
            + coarse[y0 + 1][:, x0] * fy * (1 - fx)
            + coarse[y0 + 1][:, x0 + 1] * fy * fx)


def render(spec: SceneSpec) -> RenderedSample:
    """Deterministically render one three-frame sample from the spec."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width

    depths = [r.depth for r in spec.rects]
    bg_tex = np.clip(rng.uniform(0.25, 0.75, size=3) + _smooth_noise(rng, h, w), 0.02, 1.0)
    rect_tex = []
    for r in spec.rects:
        rh, rw = r.size
        base = rng.uniform(0.2, 0.9, size=3)
        rect_tex.append(np.clip(base + _smooth_noise(rng, rh, rw), 0.02, 1.0))

    # far-to-near paint order; equal-depth overlap has no defined z-order
    order = sorted(range(len(spec.rects)), key=lambda i: -spec.rects[i].depth)

    rgb, dense, ids = [], [], []
    for f in range(3):
        img = bg_tex.copy()
        dep = np.full((h, w), spec.background_depth)
        idm = np.zeros((h, w), dtype=int)
        for i in order:
            r = spec.rects[i]
            du, dv = r.offset(f)
            r0 = int(round(r.pos[0] + dv))
            c0 = int(round(r.pos[1] + du))
            rh, rw = r.size
            rr0, rr1 = max(r0, 0), min(r0 + rh, h)
            cc0, cc1 = max(c0, 0), min(c0 + rw, w)
            if rr0 >= rr1 or cc0 >= cc1:
                continue
            clash = (np.abs(dep[rr0:rr1, cc0:cc1] - r.depth) < 1e-12) & (idm[rr0:rr1, cc0:cc1] != 0)
            if clash.any():
                raise ValueError(f"rectangles overlap at identical depth {r.depth} in frame {f}")
            img[rr0:rr1, cc0:cc1] = rect_tex[i][rr0 - r0 : rr1 - r0, cc0 - c0 : cc1 - c0]
            dep[rr0:rr1, cc0:cc1] = r.depth
            idm[rr0:rr1, cc0:cc1] = i + 1
        rgb.append(img)
        dense.append(dep)
        ids.append(idm)

    # backward flows anchored at t+1: per object, source pos - target pos
    flow_t = np.zeros((h, w, 2), dtype=np.float32)
    flow_tm1 = np.zeros((h, w, 2), dtype=np.float32)
    for i, r in enumerate(spec.rects):
        on = ids[2] == i + 1
        u2, v2 = r.offset(2)
        u1, v1 = r.offset(1)
        flow_t[on] = np.float32([u1 - u2, v1 - v2])
        flow_tm1[on] = np.float32([-u2, -v2])

    sparse = []
    for f in range(2):
        mask = rng.random((h, w)) < spec.sparsity
        sparse.append(np.where(mask, dense[f], 0.0))

    return RenderedSample(tuple(rgb), tuple(dense), tuple(sparse),
                          flow_t, flow_tm1, dense[2], tuple(ids), spec.intrinsics())


def perturb_flow(flow: np.ndarray, noise_sigma: float, seed: int) -> np.ndarray:
    """Add seeded zero-mean Gaussian noise per component; sigma 0 is identity."""
    if noise_sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {noise_sigma}")
    if noise_sigma == 0:
        return flow
    rng = np.random.default_rng(seed)
    return (flow + rng.normal(0.0, noise_sigma, size=flow.shape)).astype(flow.dtype)


def covisible_mask(sample: RenderedSample, flow: np.ndarray, src_frame: int) -> np.ndarray:
    """Pixels of frame t+1 whose flow sample hits the same object in `src_frame`."""
    from .flowwarp import warp_depth  # local import to avoid a cycle

    warped_ids = warp_depth(sample.ids[src_frame].astype(np.float64) + 1.0, flow)
    return warped_ids.mask & (warped_ids.values == sample.ids[2] + 1.0)


# ---------------------------------------------------------------------------
# Randomized per-sample scenes and dataset export


def sample_scene(spec: SceneSpec, rng: np.random.Generator, n_rects=3,
                 depth_range=(2.0, 8.0), size_range=(14, 30), speed_max=3, accel_max=1) -> SceneSpec:
    """Draw a concrete scene layout (integer motion) from parameter ranges."""
    rects = []
    for _ in range(n_rects):
        size = (int(rng.integers(size_range[0], size_range[1] + 1)),
                int(rng.integers(size_range[0], size_range[1] + 1)))
        pos = (float(rng.integers(2, spec.height - size[0] - 2)),
               float(rng.integers(2, spec.width - size[1] - 2)))
        rects.append(Rect(
            depth=float(rng.uniform(*depth_range)),
            size=size,
            pos=pos,
            velocity=(float(rng.integers(-speed_max, speed_max + 1)),
                      float(rng.integers(-speed_max, speed_max + 1))),
            acceleration=(float(rng.integers(-accel_max, accel_max + 1)),
                          float(rng.integers(-accel_max, accel_max + 1))),
        ))
    return replace(spec, rects=tuple(rects), seed=int(rng.integers(0, 2**31)))


def write_dataset(out_dir, spec: SceneSpec, n_train=200, n_val=40):
    """Render and write a dataset in the pipeline's on-disk formats.

    Flow files carry the spec's noise level (simulating flow-estimation
    error); the written ground truth stays exact. Returns the two manifest
    paths. Byte-identical across runs for a fixed spec.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(spec.seed)
    manifests = {}
    for split, n in (("train", n_train), ("val", n_val)):
        lines = []
        for i in range(n):
            scene = sample_scene(spec, master)
            s = render(scene)
            noise_seed = int(master.integers(0, 2**31))
            flow_t = perturb_flow(s.flow_t, spec.flow_noise_sigma, noise_seed)
            flow_tm1 = perturb_flow(s.flow_tm1, spec.flow_noise_sigma, noise_seed + 1)

            d = out_dir / f"{split}_{i:04d}"
            d.mkdir(exist_ok=True)
            names = []
            for j, tag in enumerate(("rgb_tm1", "rgb_t", "rgb_tp1")):
                (d / f"{tag}.png").write_bytes(dataio.encode_rgb_png(s.rgb[j]))
                names.append(f"{d.name}/{tag}.png")
            for arr, tag in ((s.sparse[0], "d_tm1"), (s.sparse[1], "d_t")):
                (d / f"{tag}.png").write_bytes(dataio.encode_depth_png(arr))
                names.append(f"{d.name}/{tag}.png")
            for arr, tag in ((flow_t, "flow_t"), (flow_tm1, "flow_tm1")):
                (d / f"{tag}.flo").write_bytes(dataio.encode_flow(arr))
                names.append(f"{d.name}/{tag}.flo")
            (d / "gt.png").write_bytes(dataio.encode_depth_png(s.gt))
            names.append(f"{d.name}/gt.png")
            dataio.save_intrinsics(d / "calib.txt", s.intrinsics)
            names.append(f"{d.name}/calib.txt")
            lines.append(" ".join(names))
        mpath = out_dir / f"{split}_manifest.txt"
        mpath.write_text("\n".join(lines) + "\n")
        manifests[split] = mpath
    return manifests["train"], manifests["val"]

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fppn.dataio import CameraIntrinsics
from fppn.pseudolidar import PointCloud, backproject, export_ply, project, summarize

K = CameraIntrinsics(100.0, 100.0, 50.0, 50.0)


def parse_ply(path):
    """Independent minimal PLY reader used as the round-trip oracle."""
    data = path.read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    assert header[0] == "ply"
    assert header[1] == "format binary_little_endian 1.0"
    n = int(next(l for l in header if l.startswith("element vertex")).split()[-1])
    props = [l.split()[1:] for l in header if l.startswith("property")]
    body = data[end:]
    if props == [["float", "x"], ["float", "y"], ["float", "z"]]:
        assert len(body) == 12 * n
        return np.frombuffer(body, dtype="<f4").reshape(n, 3), None
    assert props == [["float", "x"], ["float", "y"], ["float", "z"], ["uchar", "intensity"]]
    assert len(body) == 13 * n
    xyz = np.zeros((n, 3), dtype=np.float32)
    inten = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        x, y, z, a = struct.unpack_from("<fffB", body, 13 * i)
        xyz[i] = (x, y, z)
        inten[i] = a
    return xyz, inten


class TestBackproject:
    def test_principal_point_pixel_lies_on_axis(self):
        depth = np.zeros((101, 101))
        depth[50, 50] = 10.0  # pixel at the principal point
        cloud = backproject(depth, K)
        np.testing.assert_allclose(cloud.xyz, [[0.0, 0.0, 10.0]], atol=1e-12)

    def test_offset_pixel_hand_case(self):
        # u=150, c_u=50, f=100, d=2 -> x = (150-50)*2/100 = 2
        depth = np.zeros((60, 200))
        depth[50, 150] = 2.0
        cloud = backproject(depth, K)
        np.testing.assert_allclose(cloud.xyz, [[2.0, 0.0, 2.0]], atol=1e-12)

    def test_invalid_pixels_skipped(self):
        depth = np.zeros((8, 8))
        depth[2, 3] = 1.0
        depth[5, 5] = 4.0
        assert len(backproject(depth, K)) == 2

    def test_negative_depth_rejected(self):
        with pytest.raises(ValueError):
            backproject(np.array([[-1.0]]), K)

    def test_depth_homogeneity(self):
        """Scaling all depths scales every coordinate: rays through the pinhole."""
        rng = np.random.default_rng(0)
        depth = rng.uniform(1, 10, (16, 16))
        c1 = backproject(depth, K)
        c2 = backproject(depth * 3.0, K)
        np.testing.assert_allclose(c2.xyz, c1.xyz * 3.0, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_project_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        depth = np.where(rng.random((12, 12)) < 0.5, rng.uniform(0.5, 30, (12, 12)), 0.0)
        cloud = backproject(depth, K)
        v, u = np.nonzero(depth > 0)
        for (x, y, z), ui, vi in zip(cloud.xyz, u, v):
            pu, pv, pd = project((x, y, z), K)
            np.testing.assert_allclose([pu, pv, pd], [ui, vi, depth[vi, ui]], atol=1e-9)

    def test_project_rejects_nonpositive_z(self):
        with pytest.raises(ValueError):
            project((1.0, 1.0, 0.0), K)

    def test_intensity_from_rgb(self):
        depth = np.zeros((2, 2))
        depth[0, 1] = 5.0
        rgb = np.zeros((2, 2, 3))
        rgb[0, 1] = [1.0, 1.0, 1.0]
        cloud = backproject(depth, K, rgb=rgb)
        assert cloud.intensity.tolist() == [255]


class TestPly:
    def test_empty_cloud(self, tmp_path):
        p = tmp_path / "e.ply"
        export_ply(PointCloud(np.zeros((0, 3))), p)
        xyz, inten = parse_ply(p)
        assert xyz.shape == (0, 3) and inten is None

    def test_round_trip_xyz_only(self, tmp_path):
        rng = np.random.default_rng(1)
        pts = rng.normal(0, 5, (37, 3))
        p = tmp_path / "c.ply"
        export_ply(PointCloud(pts), p)
        xyz, inten = parse_ply(p)
        assert inten is None
        np.testing.assert_array_equal(xyz, pts.astype(np.float32))

    def test_round_trip_with_intensity(self, tmp_path):
        rng = np.random.default_rng(2)
        pts = rng.normal(0, 5, (11, 3))
        inten = rng.integers(0, 256, 11).astype(np.uint8)
        p = tmp_path / "i.ply"
        export_ply(PointCloud(pts, inten), p)
        xyz, got = parse_ply(p)
        np.testing.assert_array_equal(xyz, pts.astype(np.float32))
        np.testing.assert_array_equal(got, inten)

    def test_single_point_byte_layout(self, tmp_path):
        p = tmp_path / "s.ply"
        export_ply(PointCloud(np.array([[1.0, 2.0, 3.0]])), p)
        body = p.read_bytes().split(b"end_header\n", 1)[1]
        assert body == struct.pack("<fff", 1.0, 2.0, 3.0)

    def test_nonfinite_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="finite"):
            export_ply(PointCloud(np.array([[np.nan, 0.0, 1.0]])), tmp_path / "n.ply")


class TestSummary:
    def test_empty(self):
        assert summarize(PointCloud(np.zeros((0, 3)))) == "0 points"

    def test_bbox(self):
        s = summarize(PointCloud(np.array([[0.0, -1.0, 2.0], [3.0, 1.0, 4.0]])))
        assert s.startswith("2 points")
        assert "z [2.000, 4.000]" in s

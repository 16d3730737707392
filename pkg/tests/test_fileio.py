import numpy as np
import pytest

from touchfuse import fileio
from touchfuse.align import SparseDepth
from touchfuse.geometry import look_at
from touchfuse.sdfrender import CameraModel
from touchfuse.splat import SplatCloud


class TestPFM:
    def test_round_trip_float32_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        image = rng.uniform(0.0, 10.0, size=(12, 17)).astype(np.float32).astype(np.float64)
        path = tmp_path / "depth.pfm"
        fileio.write_pfm(path, image)
        back = fileio.read_pfm(path)
        np.testing.assert_array_equal(back, image)

    def test_header_is_bottom_up_little_endian(self, tmp_path):
        image = np.arange(6, dtype=np.float64).reshape(2, 3)
        path = tmp_path / "tiny.pfm"
        fileio.write_pfm(path, image)
        blob = path.read_bytes()
        assert blob.startswith(b"Pf\n3 2\n-1.0\n")
        # first stored row is the bottom image row
        first = np.frombuffer(blob.split(b"-1.0\n", 1)[1], dtype="<f4", count=3)
        np.testing.assert_array_equal(first, image[1].astype(np.float32))

    def test_rejects_color_input(self, tmp_path):
        with pytest.raises(ValueError):
            fileio.write_pfm(tmp_path / "x.pfm", np.zeros((4, 4, 3)))


class TestPGMAndPPM:
    def test_pgm_round_trip(self, tmp_path):
        data = np.array([[0, 85], [170, 255]], dtype=np.uint8)
        path = tmp_path / "mask.pgm"
        fileio.write_pgm(path, data)
        np.testing.assert_array_equal(fileio.read_pgm(path), data)
        assert path.read_bytes().startswith(b"P5\n2 2\n255\n")

    def test_ppm_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(1)
        rgb = rng.uniform(size=(5, 7, 3))
        path = tmp_path / "img.ppm"
        fileio.write_ppm(path, rgb)
        back = fileio.read_ppm(path)
        assert back.shape == (5, 7, 3)
        assert np.max(np.abs(back - rgb)) <= 0.5 / 255.0 + 1e-12

    def test_exact_eighths_survive(self, tmp_path):
        rgb = np.full((2, 2, 3), 0.2)
        path = tmp_path / "flat.ppm"
        fileio.write_ppm(path, rgb)
        np.testing.assert_array_equal(fileio.read_ppm(path), rgb)


class TestSplatPly:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        cloud = SplatCloud(
            rng.normal(size=(9, 3)),
            rng.uniform(size=(9, 3)),
            rng.uniform(-2, 2, size=9),
            rng.uniform(0.01, 0.2, size=9),
            np.array([0.1, 0.2, 0.3]),
        )
        path = tmp_path / "cloud.ply"
        fileio.write_splat_ply(path, cloud)
        back = fileio.read_splat_ply(path, background=(0.1, 0.2, 0.3))
        np.testing.assert_array_equal(back.positions, cloud.positions)
        np.testing.assert_array_equal(back.colors, cloud.colors)
        np.testing.assert_array_equal(back.radii, cloud.radii)
        np.testing.assert_allclose(back.opacities, cloud.opacities, rtol=1e-12)

    def test_header_properties(self, tmp_path):
        cloud = SplatCloud([[0, 0, 1]], [[1, 0, 0]], [0.0], [0.1])
        path = tmp_path / "one.ply"
        fileio.write_splat_ply(path, cloud)
        text = path.read_text()
        for prop in ("x", "y", "z", "r", "g", "b", "opacity", "radius"):
            assert f"property float64 {prop}" in text

    def test_empty_cloud_round_trip(self, tmp_path):
        empty = SplatCloud(np.empty((0, 3)), np.empty((0, 3)), np.empty(0), np.empty(0))
        path = tmp_path / "empty.ply"
        fileio.write_splat_ply(path, empty)
        back = fileio.read_splat_ply(path)
        assert len(back) == 0

    def test_wrong_properties_rejected(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float64 x\nproperty float64 y\nproperty float64 z\n"
            "end_header\n0 0 0\n"
        )
        with pytest.raises(ValueError):
            fileio.read_splat_ply(path)


class TestCameraFile:
    def test_round_trip(self, tmp_path):
        cams = [
            ("view000", CameraModel(48.0, 47.5, 31.5, 30.5, 64, 60,
                                    look_at([0, 0, -3], [0, 0, 0]))),
            ("view001", CameraModel(24.0, 24.0, 15.5, 15.5, 32, 32,
                                    look_at([3, 0.5, 0.2], [0, 0, 0]))),
        ]
        path = tmp_path / "cameras.txt"
        fileio.write_cameras(path, cams)
        back = fileio.read_cameras(path)
        assert [name for name, _ in back] == ["view000", "view001"]
        for (_, a), (_, b) in zip(cams, back):
            assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == \
                (b.fx, b.fy, b.cx, b.cy, b.width, b.height)
            np.testing.assert_array_equal(a.pose, b.pose)

    def test_incomplete_block_rejected(self, tmp_path):
        path = tmp_path / "cameras.txt"
        path.write_text("view broken\nsize 4 4\n")
        with pytest.raises(ValueError, match="incomplete"):
            fileio.read_cameras(path)


class TestSparseAndKeyValues:
    def test_sparse_round_trip(self, tmp_path):
        sparse = SparseDepth([[3, 4], [10, 2]], [1.25, 3.5], source="synthetic")
        path = tmp_path / "sparse.txt"
        fileio.write_sparse_depth(path, sparse)
        back = fileio.read_sparse_depth(path, source="synthetic")
        np.testing.assert_array_equal(back.pixels, sparse.pixels)
        np.testing.assert_array_equal(back.depths, sparse.depths)

    def test_keyvalues_round_trip(self, tmp_path):
        path = tmp_path / "scene.cfg"
        fileio.write_keyvalues(path, {"shape": "sphere", "size": "1 2 3", "seed": "7"})
        assert fileio.read_keyvalues(path) == {"shape": "sphere", "size": "1 2 3", "seed": "7"}

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("shape sphere\n")
        with pytest.raises(ValueError):
            fileio.read_keyvalues(path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "blob.bin"
    fileio.atomic_write_bytes(target, b"hello")
    assert target.read_bytes() == b"hello"
    leftovers = [p for p in tmp_path.iterdir() if p.name.startswith(".tmp-")]
    assert leftovers == []

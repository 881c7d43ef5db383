import numpy as np
import pytest

from splatmap import dataio
from splatmap.metrics import psnr_8bit, quantize_8bit, ssim_metric
from splatmap.report import read_metrics_csv, write_metrics_csv
from splatmap.scene import CameraPose


class TestPpm:
    def test_round_trip_exact_for_8bit_values(self, tmp_path):
        rng = np.random.default_rng(0)
        img8 = rng.integers(0, 256, (20, 30, 3), dtype=np.uint8)
        path = tmp_path / "a.ppm"
        dataio.write_ppm(path, img8)
        back = dataio.read_ppm(path)
        np.testing.assert_array_equal(quantize_8bit(back), img8)

    def test_float_image_quantized(self, tmp_path):
        img = np.full((4, 4, 3), 0.5)
        path = tmp_path / "b.ppm"
        dataio.write_ppm(path, img)
        back = dataio.read_ppm(path)
        np.testing.assert_allclose(back, 128 / 255.0, atol=1e-12)

    def test_rejects_non_ppm(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"JUNKJUNK")
        with pytest.raises(ValueError):
            dataio.read_ppm(path)

    def test_header_with_comment(self, tmp_path):
        path = tmp_path / "d.ppm"
        body = bytes(range(12))
        path.write_bytes(b"P6\n# a comment\n2 2\n255\n" + body)
        img = dataio.read_ppm(path)
        assert img.shape == (2, 2, 3)


class TestFloatPlane:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        plane = rng.normal(size=(17, 23)).astype(np.float32)
        path = tmp_path / "p.bin"
        dataio.write_float_plane(path, plane)
        back = dataio.read_float_plane(path)
        np.testing.assert_array_equal(back.astype(np.float32), plane)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 12)
        with pytest.raises(ValueError):
            dataio.read_float_plane(path)


class TestPoints:
    def test_round_trip_with_sources(self, tmp_path):
        rng = np.random.default_rng(2)
        rec = np.concatenate([rng.normal(size=(5, 3)),
                              rng.uniform(0, 1, (5, 3)),
                              np.array([[0], [1], [0], [1], [1]])], axis=1)
        path = tmp_path / "pts.bin"
        dataio.write_points(path, rec)
        back = dataio.read_points(path)
        np.testing.assert_allclose(back, rec, atol=1e-6)
        colored = dataio.points_to_colored(back)
        assert [p.source.name for p in colored] == \
            ["LIDAR", "SFM", "LIDAR", "SFM", "SFM"]

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "trunc.bin"
        path.write_bytes(b"\x00" * 27)
        with pytest.raises(ValueError):
            dataio.read_points(path)


class TestPoseManifest:
    def test_pose_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        from splatmap.projection import quat_to_rot
        pose = CameraPose(quat_to_rot(q), rng.normal(size=3))
        path = tmp_path / "pose.txt"
        dataio.write_pose(path, pose)
        back = dataio.read_pose(path)
        np.testing.assert_allclose(back.rotation_wc, pose.rotation_wc, atol=1e-15)
        np.testing.assert_allclose(back.translation_wc, pose.translation_wc,
                                   atol=1e-15)

    def test_manifest_comments_and_values(self, tmp_path):
        path = tmp_path / "manifest.txt"
        path.write_text("# header\nframe_count = 5\nfx = 80.0  # focal\n\n")
        got = dataio.read_manifest(path)
        assert got == {"frame_count": "5", "fx": "80.0"}


class TestMetrics:
    def test_psnr_identical_images_capped(self):
        img = np.random.default_rng(4).uniform(0, 1, (16, 16, 3))
        assert psnr_8bit(img, img) == 99.0

    def test_psnr_known_value(self):
        a = np.zeros((8, 8, 3))
        b = np.full((8, 8, 3), 10.0 / 255.0)
        want = 10 * np.log10(255.0 ** 2 / 100.0)
        assert psnr_8bit(a, b) == pytest.approx(want, rel=1e-9)

    def test_ssim_metric_identity(self):
        img = np.random.default_rng(5).uniform(0, 1, (16, 16, 3))
        assert ssim_metric(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_metrics_csv_round_trip(self, tmp_path):
        rows = [{"view_index": 0, "kind": "train", "psnr": 25.1234, "ssim": 0.9111},
                {"view_index": 9, "kind": "novel", "psnr": 22.5, "ssim": 0.8}]
        averages = {"train": (25.1234, 0.9111), "novel": (22.5, 0.8)}
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, rows, averages)
        rows2, avg2 = read_metrics_csv(path)
        assert rows2[0]["view_index"] == 0 and rows2[1]["kind"] == "novel"
        assert avg2["train"][0] == pytest.approx(25.1234, abs=1e-4)

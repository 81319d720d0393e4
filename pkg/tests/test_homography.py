import numpy as np
import pytest

from aerialview.domain import DegenerateGeometryError, ImageBuffer
from aerialview.homography import (
    HomographyMatrix,
    IPMConfig,
    apply_homography,
    compute_ipm,
    compute_rotation_augment,
    dlt_homography,
    ipm_correspondences,
    rotation_homography,
    warp_image,
)
from conftest import make_fixture_image


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    return float(10.0 * np.log10(255.0 ** 2 / mse)) if mse > 0 else np.inf


def random_quad(rng, lo=0.0, hi=100.0):
    """Random 4 points with no 3 collinear (rejection sampled)."""
    while True:
        pts = rng.uniform(lo, hi, (4, 2))
        ok = True
        for i in range(4):
            a, b, c = [pts[j] for j in range(4) if j != i]
            area = abs((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
            if area < 1e-2 * (hi - lo) ** 2 / 100:
                ok = False
        if ok:
            return pts


class TestDLT:
    def test_identity(self):
        corners = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 8.0], [0.0, 8.0]])
        h = dlt_homography(corners, corners)
        assert np.allclose(h.m, np.eye(3), atol=1e-10)

    def test_pure_scaling(self):
        corners = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 8.0], [0.0, 8.0]])
        h = dlt_homography(corners, corners * 2.0)
        assert np.allclose(h.m, np.diag([2.0, 2.0, 1.0]), atol=1e-10)

    def test_recovers_random_homography(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            true = np.eye(3) + rng.normal(0.0, 0.1, (3, 3))
            true[2, 2] = 1.0
            if abs(np.linalg.det(true)) < 1e-3:
                continue
            h_true = HomographyMatrix(true)
            src = random_quad(rng)
            dst = apply_homography(h_true, src)
            h = dlt_homography(src, dst)
            assert np.allclose(h.m, h_true.m, atol=1e-8)

    def test_collinear_points_rejected(self):
        src = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 5.0]])
        dst = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        with pytest.raises(DegenerateGeometryError):
            dlt_homography(src, dst)

    def test_roundtrip_property_on_interior_points(self):
        # recovered homography reproduces the mapping on 100 interior points
        rng = np.random.default_rng(1)
        for _ in range(10):
            src = random_quad(rng)
            dst = random_quad(rng)
            h = dlt_homography(src, dst)
            pts = rng.uniform(20.0, 80.0, (100, 2))
            direct = apply_homography(h, pts)
            again = apply_homography(dlt_homography(src, apply_homography(h, src)), pts)
            assert np.allclose(direct, again, atol=1e-6)


class TestIPMCorrespondences:
    def test_zero_strength_identity(self):
        src, dst = ipm_correspondences(100, 80, IPMConfig(strength=0.0))
        assert np.array_equal(src, dst)

    def test_half_strength_displacement(self):
        _, dst = ipm_correspondences(100, 80, IPMConfig(strength=0.5))
        assert tuple(dst[0]) == (-50.0, 0.0)
        assert tuple(dst[1]) == (150.0, 0.0)
        assert tuple(dst[2]) == (100.0, 80.0)
        assert tuple(dst[3]) == (0.0, 80.0)

    def test_dlt_maps_corners_exactly(self):
        src, dst = ipm_correspondences(64, 64, IPMConfig(strength=0.3))
        h = dlt_homography(src, dst)
        assert np.allclose(apply_homography(h, src), dst, atol=1e-9)


class TestWarp:
    def test_identity_warp_bit_exact(self, fixture_image):
        out = warp_image(fixture_image, HomographyMatrix(np.eye(3)), IPMConfig())
        assert np.array_equal(out.data, fixture_image.data)

    def test_horizontal_flip_two_pixels(self):
        # 2x1 image [a, b]; plane spans [0, 2], flip about x = 1
        img = ImageBuffer(np.array([[[10, 20, 30], [200, 210, 220]]], dtype=np.uint8))
        flip = HomographyMatrix(np.array([[-1.0, 0.0, 2.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        out = warp_image(img, flip, IPMConfig())
        assert np.array_equal(out.data[0, 0], img.data[0, 1])
        assert np.array_equal(out.data[0, 1], img.data[0, 0])

    def test_out_of_frame_fill_white(self, fixture_image):
        shift = HomographyMatrix(np.array([[1.0, 0.0, 1e5], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        out = warp_image(fixture_image, shift, IPMConfig(fill="white"))
        assert np.all(out.data == 255)

    def test_noninvertible_rejected(self):
        with pytest.raises(DegenerateGeometryError):
            HomographyMatrix(np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))

    def test_warp_roundtrip_psnr(self):
        img = make_fixture_image(96)
        src, dst = ipm_correspondences(96, 96, IPMConfig(strength=0.25))
        h = dlt_homography(src, dst)
        cfg = IPMConfig(strength=0.25, fill="edge")
        there = warp_image(img, h, cfg)
        back = warp_image(there, h.inverse(), cfg)
        interior = (slice(5, -5), slice(5, -5))
        assert psnr(back.data[interior], img.data[interior]) > 30.0


class TestComputeIPM:
    def test_zero_strength_is_identity_bit_exact(self, fixture_image):
        out = compute_ipm(fixture_image, IPMConfig(strength=0.0))
        assert np.array_equal(out.data, fixture_image.data)

    def test_bottom_row_fixed(self, fixture_image):
        out = compute_ipm(fixture_image, IPMConfig(strength=0.3))
        assert np.array_equal(out.data[-1], fixture_image.data[-1])

    def test_output_dims_follow_config(self, fixture_image):
        out = compute_ipm(fixture_image, IPMConfig(strength=0.3, output_size=(32, 48)))
        assert (out.width, out.height) == (32, 48)

    def test_top_row_magnifies_center(self, fixture_image):
        # forward map stretches the top edge outward, so output (0, 0)
        # samples the source top row at plane x = s*w / (1 + 2s)
        s, w = 0.5, 64
        out = compute_ipm(fixture_image, IPMConfig(strength=s, fill="white"))
        x_plane = s * w / (1.0 + 2.0 * s)
        gx = x_plane * (w - 1) / w
        x0, fx = int(np.floor(gx)), gx - np.floor(gx)
        row = fixture_image.data[0].astype(np.float64)
        expected = np.rint(row[x0] * (1 - fx) + row[x0 + 1] * fx)
        assert np.allclose(out.data[0, 0], expected, atol=1.0)

    def test_rotation_variant(self, fixture_image):
        rot = compute_rotation_augment(fixture_image, degrees=45.0)
        assert rot.data.shape == fixture_image.data.shape
        assert not np.array_equal(rot.data, fixture_image.data)
        # 360 degrees is the identity rotation
        full = compute_rotation_augment(fixture_image, degrees=360.0)
        assert np.array_equal(full.data, fixture_image.data)

    def test_rotation_homography_moves_center_nowhere(self):
        h = rotation_homography(64, 64, 45.0)
        center = np.array([[32.0, 32.0]])
        assert np.allclose(apply_homography(h, center), center, atol=1e-9)

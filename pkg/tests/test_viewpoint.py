"""Viewpoint detector tests: heatmap construction, greedy selection,
viewport extraction, and the dump formats."""
import math

import numpy as np
import pytest

from omniqa import imgproc, viewpoint
from omniqa.sphere import ErpGeometry, SphericalCoord, angular_dist, pix_to_sph
from omniqa.viewpoint import (
    DetectorConfig,
    ViewpointSet,
    build_heatmap,
    build_keypoint_map,
    detect_viewpoints,
    extract_viewports,
    read_viewpoint_csv,
    select_viewpoints,
    write_viewpoint_csv,
)


def blob_image(h, w, spots, sigma=3.0):
    """Gray raster with Gaussian bumps at (x, y, amplitude) triples."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for x, y, a in spots:
        dx = np.mod(xx - x + w / 2.0, w) - w / 2.0
        img += a * np.exp(-(dx ** 2 + (yy - y) ** 2) / (2 * sigma ** 2))
    return img


class TestDetectorConfig:
    def test_default_values(self):
        cfg = DetectorConfig()
        assert cfg.n_viewpoints == 20
        assert cfg.d_th == 30.0
        assert cfg.pad_frac == 0.125
        assert cfg.heat_sigma == 8.0

    def test_validation(self):
        with pytest.raises(ValueError):
            DetectorConfig(n_viewpoints=0)
        with pytest.raises(ValueError):
            DetectorConfig(d_th=200.0)
        with pytest.raises(ValueError):
            DetectorConfig(pad_frac=0.7)


class TestKeypointMap:
    def test_constant_image_all_zero(self):
        cfg = DetectorConfig()
        kmap = build_keypoint_map(np.full((64, 128), 0.5), cfg)
        assert not kmap.any()

    def test_single_blob_single_pixel(self):
        cfg = DetectorConfig()
        img = blob_image(64, 128, [(50, 30, 1.0)])
        kmap = build_keypoint_map(img, cfg)
        assert np.count_nonzero(kmap) == 1

    def test_margin_keypoints_fold_to_interior(self):
        # A blob at the seam is detected in the pad copies too; every
        # accumulated response must land on interior columns so that
        # stripping the pads keeps it, at the wrapped position.
        cfg = DetectorConfig()
        img = blob_image(64, 128, [(0, 30, 1.0)])
        kmap = build_keypoint_map(img, cfg)
        pad = math.ceil(cfg.pad_frac * 128)
        assert kmap.any()
        assert not kmap[:, :pad].any()
        assert not kmap[:, pad + 128:].any()
        cols = np.nonzero(kmap.any(axis=0))[0] - pad
        assert all(c % 128 <= 2 or c % 128 >= 126 for c in cols)


class TestHeatmap:
    def test_zero_map_zero_heatmap(self):
        cfg = DetectorConfig(heat_sigma=2.0)
        heat = build_heatmap(np.zeros((32, 80)), cfg, pad_cols=8)
        assert heat.shape == (32, 64)
        assert not heat.any()

    def test_impulse_becomes_gaussian_bump(self):
        cfg = DetectorConfig(heat_sigma=2.0)
        kmap = np.zeros((32, 80))
        kmap[16, 40] = 1.0
        heat = build_heatmap(kmap, cfg, pad_cols=8)
        assert np.unravel_index(np.argmax(heat), heat.shape) == (16, 32)
        assert heat[16, 32] == pytest.approx(
            imgproc.gaussian_kernel(2.0, 6)[6, 6], abs=1e-12)

    def test_strip_reduces_mass(self):
        rng = np.random.default_rng(0)
        cfg = DetectorConfig(heat_sigma=2.0)
        kmap = rng.random((32, 80))
        heat = build_heatmap(kmap, cfg, pad_cols=8)
        assert heat.sum() <= kmap.sum() + 1e-9

    def test_pad_inference_matches_explicit(self):
        cfg = DetectorConfig(heat_sigma=2.0, pad_frac=0.125)
        kmap = np.random.default_rng(1).random((16, 40))  # 32 + 2*4
        assert np.array_equal(build_heatmap(kmap, cfg),
                              build_heatmap(kmap, cfg, pad_cols=4))


class TestSelectViewpoints:
    def test_single_cell(self):
        heat = np.zeros((64, 128))
        heat[10, 20] = 1.0
        cfg = DetectorConfig(n_viewpoints=1)
        vps = select_viewpoints(heat, cfg)
        expect = pix_to_sph(20, 10, ErpGeometry(128, 64))
        assert len(vps) == 1
        assert vps.points[0] == expect
        assert not vps.exhausted

    def test_close_second_peak_rejected(self):
        heat = np.zeros((64, 128))
        heat[32, 64] = 1.0
        heat[32, 67] = 0.5  # ~8.4 degrees away at the equator
        cfg = DetectorConfig(n_viewpoints=2, d_th=30.0)
        vps = select_viewpoints(heat, cfg)
        assert len(vps) == 1
        assert vps.exhausted

    def test_three_separated_peaks_in_descending_order(self):
        heat = np.zeros((64, 128))
        heat[32, 10] = 0.8
        heat[32, 60] = 1.0
        heat[10, 100] = 0.9
        cfg = DetectorConfig(n_viewpoints=3, d_th=30.0)
        vps = select_viewpoints(heat, cfg)
        assert len(vps) == 3
        assert vps.responses == (1.0, 0.9, 0.8)

    def test_row_major_tie_break(self):
        heat = np.zeros((64, 128))
        heat[5, 100] = 1.0
        heat[5, 3] = 1.0
        heat[2, 50] = 1.0
        cfg = DetectorConfig(n_viewpoints=3, d_th=10.0)
        vps = select_viewpoints(heat, cfg)
        g = ErpGeometry(128, 64)
        assert vps.points[0] == pix_to_sph(50, 2, g)
        assert vps.points[1] == pix_to_sph(3, 5, g)
        assert vps.points[2] == pix_to_sph(100, 5, g)

    def test_pairwise_separation_invariant(self):
        rng = np.random.default_rng(2)
        cfg = DetectorConfig(n_viewpoints=20, d_th=30.0)
        for _ in range(10):
            vps = select_viewpoints(rng.random((64, 128)), cfg)
            pts = vps.points
            for i in range(len(pts)):
                for j in range(i + 1, len(pts)):
                    assert angular_dist(pts[i], pts[j]) > cfg.d_th

    def test_input_heatmap_not_mutated(self):
        rng = np.random.default_rng(3)
        heat = rng.random((64, 128))
        copy = heat.copy()
        select_viewpoints(heat, DetectorConfig(n_viewpoints=5))
        assert np.array_equal(heat, copy)


class TestDetectPipeline:
    def test_deterministic(self):
        rng = np.random.default_rng(4)
        img = imgproc.gaussian_blur(rng.random((64, 128)), 1.5).astype(np.float64)
        cfg = DetectorConfig(n_viewpoints=6)
        a, heat_a = detect_viewpoints(img, cfg)
        b, heat_b = detect_viewpoints(img, cfg)
        assert a.points == b.points
        assert np.array_equal(heat_a, heat_b)

    def test_textured_image_yields_points(self):
        rng = np.random.default_rng(5)
        img = imgproc.gaussian_blur(rng.random((64, 128)), 1.2).astype(np.float64)
        vps, heat = detect_viewpoints(img, DetectorConfig(n_viewpoints=5, d_th=20.0))
        assert len(vps) >= 2
        assert heat.shape == (64, 128)


class TestExtractViewports:
    def test_constant_erp_constant_viewports(self):
        erp = np.full((64, 128, 3), 77, dtype=np.uint8)
        vps = ViewpointSet((SphericalCoord(0, 0), SphericalCoord(90, 30)))
        views = extract_viewports(erp, vps, fov=90.0, size=32)
        assert views.shape == (2, 32, 32, 3)
        assert np.all(views == 77)

    def test_marker_lands_at_viewport_center(self):
        erp = np.zeros((64, 128, 3), dtype=np.uint8)
        gx, gy = 63, 31   # pixel closest to (lon 0, lat 0) center
        erp[gy - 1:gy + 3, gx - 1:gx + 3] = 255
        vps = ViewpointSet((SphericalCoord(0, 0),))
        views = extract_viewports(erp, vps, fov=90.0, size=33)
        c = views.shape[1] // 2
        assert views[0, c, c, 0] == 255

    def test_matches_per_pixel_ray_oracle(self):
        rng = np.random.default_rng(6)
        erp = (rng.random((32, 64, 3)) * 255).astype(np.uint8)
        center = SphericalCoord(25.0, -10.0)
        views = extract_viewports(erp, ViewpointSet((center,)), fov=90.0, size=8)
        from omniqa.sphere import ViewportSpec, sph_to_pix, viewport_ray_to_sph
        spec = ViewportSpec(center, 90.0, 8)
        g = ErpGeometry(64, 32)
        for u in range(8):
            for v in range(8):
                p = viewport_ray_to_sph(u, v, spec)
                x, y = sph_to_pix(p, g)
                val = imgproc.bilinear_sample(erp, x, y)
                got = views[0, v, u].astype(np.float64)
                assert np.all(np.abs(got - np.round(val)) <= 1.0)

    def test_rejects_non_panoramic_input(self):
        with pytest.raises(imgproc.ImageError):
            extract_viewports(np.zeros((10, 15, 3), dtype=np.uint8),
                              ViewpointSet((SphericalCoord(0, 0),)))


class TestDumps:
    def test_viewpoint_csv_round_trip(self, tmp_path):
        vps = ViewpointSet((SphericalCoord(10.5, -20.25), SphericalCoord(-170.0, 80.0)),
                           (0.5, 0.25))
        path = tmp_path / "vp.csv"
        write_viewpoint_csv(path, vps)
        back = read_viewpoint_csv(path)
        assert back.points == vps.points
        assert back.responses == vps.responses

    def test_heatmap_png_normalized(self, tmp_path):
        heat = np.zeros((16, 32))
        heat[4, 7] = 2.5
        path = tmp_path / "h.png"
        viewpoint.dump_heatmap_png(path, heat)
        img = imgproc.read_png(path)
        assert img.shape == (16, 32)
        assert img[4, 7] == 255

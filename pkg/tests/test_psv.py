"""Plane sweep volume construction, the warp kernel against its
brute-force oracle, and the non-learned reference synthesizer."""

import numpy as np
import pytest

from conftest import make_camera, oracle_warp, random_camera_pair
from sweepsynth.psv import (
    InvalidRange,
    build_psv,
    denormalize,
    grayscale_planes,
    hardwired_synthesize,
    normalize_for_net,
    sample_depths,
    warp_plane,
)
from sweepsynth.training import ScenePlane, SyntheticScene, render_synthetic


def _away_from_border(u, v, w, h, margin=1e-4):
    """Pixels whose source coordinate is not within ``margin`` of the
    validity boundary (where the fast path's 1e-6 slack may differ)."""
    return (
        (np.abs(u) > margin)
        & (np.abs(u - (w - 1)) > margin)
        & (np.abs(v) > margin)
        & (np.abs(v - (h - 1)) > margin)
    )


class TestDepthSampling:
    def test_preset_endpoints(self):
        ds = sample_depths(19, 1.0, 100.0)
        assert ds.depths[0] == 100.0 and ds.depths[18] == 1.0
        ds = sample_depths(17, 0.3, 16.0)
        assert ds.depths[0] == 16.0 and ds.depths[-1] == 0.3

    def test_two_planes_are_endpoints(self):
        ds = sample_depths(2, 0.5, 8.0)
        assert ds.depths.tolist() == [8.0, 0.5]

    def test_midpoint_formula_value(self):
        # 1 / (0.01 + 0.5 * 0.99) evaluated from the stated formula
        ds = sample_depths(19, 1.0, 100.0)
        assert ds.depths[9] == pytest.approx(1.9801980198019802, abs=1e-12)

    def test_disparity_is_arithmetic(self):
        for dmin, dmax in [(1.0, 100.0), (0.3, 16.0)]:
            for n in (13, 17, 19, 32):
                ds = sample_depths(n, dmin, dmax)
                disp = 1.0 / ds.depths
                steps = np.diff(disp)
                assert np.abs(steps - steps[0]).max() < 1e-9
                assert np.all(np.diff(ds.depths) < 0)  # far -> near

    def test_invalid_ranges(self):
        with pytest.raises(InvalidRange):
            sample_depths(1, 1.0, 2.0)
        with pytest.raises(InvalidRange):
            sample_depths(5, 2.0, 1.0)
        with pytest.raises(InvalidRange):
            sample_depths(5, -1.0, 1.0)


class TestWarpPlane:
    def test_identity_warp_exact(self, rng):
        cam = make_camera(width=40, height=30, angles=(0.1, -0.05, 0.02),
                          position=(0.4, 0.1, -0.2))
        img = rng.random((30, 40, 3)).astype(np.float32)
        for d in (0.7, 3.0, 50.0):
            warped, valid = warp_plane(img, cam, cam, d)
            assert np.array_equal(warped, img)
            assert valid.min() == 1.0

    def test_pure_translation_shifts_delta_texture(self):
        tgt = make_camera(width=64, height=32, f=100.0, center=(31.5, 15.5))
        src = make_camera(width=64, height=32, f=100.0, center=(31.5, 15.5),
                          position=(0.065, 0.0, 0.0))
        img = np.zeros((32, 64, 3), np.float32)
        img[10, 20] = 1.0
        warped, _ = warp_plane(img, src, tgt, 1.3)  # shift = fx*b/d = 5 px
        assert warped[10, 25, 0] == pytest.approx(1.0, abs=1e-6)
        warped[10, 25] = 0.0
        assert np.abs(warped).max() < 1e-6

    def test_matches_bruteforce_oracle(self, rng):
        worst_i = 0.0
        for _ in range(25):
            src, tgt = random_camera_pair(rng)
            d = float(rng.uniform(1.0, 20.0))
            img = rng.random((src.height, src.width, 3)).astype(np.float32)
            fast, valid = warp_plane(img, src, tgt, d)
            ref, ref_valid, (u, v) = oracle_warp(img, src, tgt, d)
            away = _away_from_border(u, v, src.width, src.height)
            assert np.array_equal(valid.astype(bool)[away], ref_valid[away])
            both = valid.astype(bool) & ref_valid
            worst_i = max(worst_i, np.abs(fast - ref)[both].max())
        assert worst_i < 1e-5

    def test_validity_iff_oracle_in_bounds(self, rng):
        src, tgt = random_camera_pair(rng, baseline=0.6)
        img = rng.random((src.height, src.width, 3)).astype(np.float32)
        _, valid = warp_plane(img, src, tgt, 2.0)
        _, _, (u, v) = oracle_warp(img, src, tgt, 2.0)
        in_bounds = (u >= 0) & (u <= src.width - 1) & (v >= 0) & (v <= src.height - 1)
        away = _away_from_border(u, v, src.width, src.height)
        assert np.array_equal(valid.astype(bool)[away], in_bounds[away])
        assert 0 < valid.sum() < valid.size  # both regions exercised


class TestBuildPsv:
    def test_shapes_and_order(self, rng):
        tgt = make_camera(width=64, height=36)
        s1 = make_camera(width=64, height=36, position=(-0.1, 0, 0))
        s2 = make_camera(width=64, height=36, position=(0.1, 0, 0))
        imgs = [rng.random((36, 64, 3)).astype(np.float32) for _ in range(2)]
        ds = sample_depths(19, 1.0, 100.0)
        vol = build_psv(imgs, [s1, s2], tgt, ds)
        assert vol.planes.shape == (38, 3, 36, 64)
        assert vol.validity.shape == (38, 1, 36, 64)
        assert np.all(np.isfinite(vol.planes))
        # source-major order: first N planes come from view 1
        direct, _ = warp_plane(imgs[0], s1, tgt, float(ds.depths[3]))
        assert np.array_equal(vol.planes[3], direct.transpose(2, 0, 1))

    def test_identical_cameras_reproduce_input(self, rng):
        cam = make_camera(width=48, height=32)
        img = rng.random((32, 48, 3)).astype(np.float32)
        vol = build_psv([img, img], [cam, cam], cam, sample_depths(5, 1.0, 10.0))
        for p in range(10):
            assert np.array_equal(vol.planes[p], img.transpose(2, 0, 1))

    def test_needs_two_views(self, rng):
        cam = make_camera()
        img = rng.random((cam.height, cam.width, 3)).astype(np.float32)
        with pytest.raises(ValueError):
            build_psv([img], [cam], cam, sample_depths(3, 1.0, 5.0))

    def test_cross_view_error_minimal_at_true_plane(self, rng):
        # a textured plane at a sampled depth: photometric agreement
        # between the two warped views peaks exactly at that plane
        ds = sample_depths(19, 1.0, 100.0)
        hits = 0
        for trial in range(10):
            j = int(rng.integers(2, 17))
            d = float(ds.depths[j])
            half = 0.95 * d  # just beyond the visible frustum
            scene = SyntheticScene((ScenePlane(
                depth=d, x0=-half, x1=half, y0=-half, y1=half,
                seed=int(rng.integers(1 << 30)), noise_cells=32),))
            tgt = make_camera(width=96, height=64, f=90.0)
            s1 = make_camera(width=96, height=64, f=90.0, position=(-0.15, 0.02, 0))
            s2 = make_camera(width=96, height=64, f=90.0, position=(0.15, -0.02, 0))
            imgs = [render_synthetic(scene, c)[0] for c in (s1, s2)]
            vol = build_psv(imgs, [s1, s2], tgt, ds)
            p1, p2 = vol.planes[:19], vol.planes[19:]
            v = (vol.validity[:19] * vol.validity[19:])[:, 0]
            err = np.array([
                ((p1[i] - p2[i]) ** 2).sum(axis=0)[v[i] > 0].mean() for i in range(19)
            ])
            best = int(err.argmin())
            if best == j:
                hits += 1
            # unimodal within tolerance: strictly decreasing to the
            # minimum and increasing after, allowing tiny plateaus
            left = err[: best + 1]
            right = err[best:]
            assert np.all(np.diff(left) <= 1e-6 + 0.02 * left[:-1])
            assert np.all(np.diff(right) >= -(1e-6 + 0.02 * right[1:]))
        assert hits >= 9

    def test_deterministic(self, rng):
        src, tgt = random_camera_pair(rng)
        img = rng.random((src.height, src.width, 3)).astype(np.float32)
        ds = sample_depths(7, 1.0, 50.0)
        a = build_psv([img, img], [src, src], tgt, ds)
        b = build_psv([img, img], [src, src], tgt, ds)
        assert np.array_equal(a.planes, b.planes)
        assert np.array_equal(a.validity, b.validity)


class TestGrayscale:
    def test_primaries(self):
        tgt = make_camera(width=16, height=12)
        white = np.ones((12, 16, 3), np.float32)
        red = np.zeros((12, 16, 3), np.float32)
        red[..., 0] = 1.0
        vol = build_psv([white, red], [tgt, tgt], tgt, sample_depths(2, 1.0, 4.0))
        gray = grayscale_planes(vol)
        assert gray.shape == (4, 1, 12, 16)
        assert np.allclose(gray[0], 1.0, atol=1e-6)
        assert np.allclose(gray[2], 0.299, atol=1e-6)

    def test_matches_scalar_oracle(self, rng):
        tgt = make_camera(width=8, height=8)
        img = rng.random((8, 8, 3)).astype(np.float32)
        vol = build_psv([img, img], [tgt, tgt], tgt, sample_depths(2, 1.0, 4.0))
        gray = grayscale_planes(vol)
        for _ in range(50):
            y, x = rng.integers(0, 8, 2)
            r, g, b = (float(v) for v in img[y, x])
            assert gray[0, 0, y, x] == pytest.approx(0.299 * r + 0.587 * g + 0.114 * b,
                                                     abs=1e-6)


class TestNormalization:
    def test_midpoint_and_roundtrip(self, rng):
        assert normalize_for_net(np.float32(0.5)) == pytest.approx(0.0)
        x = rng.random((4, 4, 3)).astype(np.float32)
        assert np.abs(denormalize(normalize_for_net(x)) - x).max() < 1e-6

    def test_denormalize_clamps_tanh_range(self):
        y = np.array([-1.0, -0.5, 0.0, 0.5, 1.0], np.float32)
        out = denormalize(y)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out[2] == pytest.approx(0.5)


class TestHardwired:
    def test_identity_cameras_reproduce_input(self, rng):
        cam = make_camera(width=48, height=32)
        img = rng.random((32, 48, 3)).astype(np.float32)
        vol = build_psv([img, img], [cam, cam], cam, sample_depths(7, 1.0, 20.0))
        out, picked = hardwired_synthesize(vol)
        assert np.abs(out - img).max() < 1e-6
        assert picked.shape == (32, 48)

    def test_single_plane_scene_recovers_render(self, rng):
        ds = sample_depths(19, 1.0, 100.0)
        d = float(ds.depths[12])
        half = 0.95 * d
        scene = SyntheticScene((ScenePlane(
            depth=d, x0=-half, x1=half, y0=-half, y1=half,
            seed=99, noise_cells=32),))
        tgt = make_camera(width=96, height=64, f=90.0)
        s1 = make_camera(width=96, height=64, f=90.0, position=(-0.12, 0, 0))
        s2 = make_camera(width=96, height=64, f=90.0, position=(0.12, 0, 0))
        imgs = [render_synthetic(scene, c)[0] for c in (s1, s2)]
        vol = build_psv(imgs, [s1, s2], tgt, ds)
        out, picked = hardwired_synthesize(vol)
        truth, _ = render_synthetic(scene, tgt)
        # both views must actually observe the pixel at the true plane
        both = (vol.validity[12, 0] * vol.validity[19 + 12, 0]) > 0
        interior = both.copy()
        interior[:2] = interior[-2:] = False
        interior[:, :2] = interior[:, -2:] = False
        err = np.abs(out - truth)[interior]
        assert np.quantile(err, 0.99) < 0.05
        assert (picked[interior] == 12).mean() > 0.95

    def test_requires_two_views(self, rng):
        cam = make_camera(width=24, height=24)
        img = rng.random((24, 24, 3)).astype(np.float32)
        vol = build_psv([img, img, img], [cam, cam, cam], cam, sample_depths(3, 1.0, 5.0))
        with pytest.raises(ValueError):
            hardwired_synthesize(vol)

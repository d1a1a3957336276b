"""Scene construction and forward Poisson rendering."""

import numpy as np
import pytest

from mslidar.cube import CubeDims, SamplingMask
from mslidar.simulator import (
    SceneSpec,
    SurfaceSpec,
    desk_scene,
    emg_irf,
    expected_photons_per_histogram,
    gaussian_irf,
    make_scene,
    render_cube,
)


class TestMakeScene:
    def test_single_plane_one_point_per_pixel(self):
        dims = CubeDims(4, 4, 2, 50)
        depth = np.full((4, 4), 25.0)
        refl = np.ones((4, 4, 2))
        spec = SceneSpec(dims, [SurfaceSpec(depth, refl)], background_mode="constant",
                         photons_per_band_pixel=8.0, background_photons=2.0)
        irf = gaussian_irf(2, sigma=1.5, radius=4)
        cloud, B = make_scene(spec, irf)
        assert cloud.n_points == 16
        for n in cloud.ids():
            assert cloud.t(n) == 25.0
        assert (B > 0).all()

    def test_overlay_two_points_with_separation(self):
        scene = desk_scene(n_rows=16, n_cols=16, n_bands=2, n_bins=200,
                           overlay_offset=50.0, d_min_check=17.0)
        irf = gaussian_irf(2, sigma=3.0, radius=10)
        cloud, B = make_scene(scene, irf)
        two = sum(1 for pix, ids in cloud.pixel_index.items() if len(ids) == 2)
        assert two == 8 * 8  # central quarter
        for pix, ids in cloud.pixel_index.items():
            if len(ids) == 2:
                assert abs(cloud.t(ids[0]) - cloud.t(ids[1])) >= 17.0

    def test_photon_budget_exact(self):
        scene = desk_scene(n_rows=16, n_cols=16, n_bands=4, n_bins=300)
        irf = gaussian_irf(4, sigma=3.0, radius=10)
        cloud, B = make_scene(scene, irf)
        mean = expected_photons_per_histogram(cloud, B, irf, scene.dims)
        assert mean == pytest.approx(10.0, rel=0.01)
        bkg = float(B.mean()) * scene.dims.n_bins
        assert bkg == pytest.approx(3.4, rel=0.01)

    def test_hardcore_violation_detected(self):
        dims = CubeDims(2, 2, 1, 50)
        depth = np.full((2, 2), 25.0)
        refl = np.ones((2, 2, 1))
        spec = SceneSpec(dims, [SurfaceSpec(depth, refl), SurfaceSpec(depth + 2.0, refl)],
                         background_mode="constant", d_min_check=5.0,
                         photons_per_band_pixel=8.0, background_photons=2.0)
        with pytest.raises(ValueError):
            make_scene(spec, gaussian_irf(1, sigma=1.5, radius=4))


class TestRenderCube:
    def test_zero_intensity_empty(self):
        from mslidar.pointcloud import PointCloud
        dims = CubeDims(3, 3, 1, 20)
        rng = np.random.default_rng(0)
        B = np.full((3, 3, 1), 1e-12)
        cube = render_cube(PointCloud(1), B, gaussian_irf(1, sigma=1.0, radius=3),
                           SamplingMask.full(3, 3, 1), rng, dims=dims)
        assert cube.total_photons() == 0

    def test_masked_pixel_band_dark(self):
        from mslidar.pointcloud import PointCloud
        dims = CubeDims(2, 2, 2, 30)
        cloud = PointCloud(2)
        cloud.add(0, 0, 15.0, np.log([5.0, 5.0]))
        bits = np.ones((2, 2, 2), dtype=np.uint8)
        bits[0, 0, 1] = 0
        rng = np.random.default_rng(1)
        cube = render_cube(cloud, np.full((2, 2, 2), 0.5),
                           gaussian_irf(2, sigma=1.0, radius=3),
                           SamplingMask(bits), rng, dims=dims)
        bins, counts = cube.get(0, 0, 1)
        assert bins.size == 0

    def test_poisson_mean_clt_bound(self):
        from mslidar.pointcloud import PointCloud
        lam = 2.0
        dims = CubeDims(10, 10, 1, 100)  # 1e4 active bins
        rng = np.random.default_rng(2)
        cube = render_cube(PointCloud(1), np.full((10, 10, 1), lam),
                           gaussian_irf(1, sigma=1.0, radius=3),
                           SamplingMask.full(10, 10, 1), rng, dims=dims)
        mean = cube.total_photons() / 1e4
        bound = 3.0 * np.sqrt(lam / 1e4)
        assert abs(mean - lam) < bound

    def test_dispersion_near_one(self):
        from mslidar.pointcloud import PointCloud
        lam = 1.5
        dims = CubeDims(8, 8, 1, 150)
        rng = np.random.default_rng(3)
        cube = render_cube(PointCloud(1), np.full((8, 8, 1), lam),
                           gaussian_irf(1, sigma=1.0, radius=3),
                           SamplingMask.full(8, 8, 1), rng, dims=dims)
        z = cube.dense().ravel()
        assert z.var() / z.mean() == pytest.approx(1.0, abs=0.05)

    def test_reproducible_under_seed(self):
        scene = desk_scene(n_rows=8, n_cols=8, n_bands=2, n_bins=120)
        irf = gaussian_irf(2, sigma=3.0, radius=10)
        cloud, B = make_scene(scene, irf)
        mask = SamplingMask.full(8, 8, 2)
        c1 = render_cube(cloud, B, irf, mask, np.random.default_rng(9), dims=scene.dims)
        c2 = render_cube(cloud, B, irf, mask, np.random.default_rng(9), dims=scene.dims)
        assert c1.events.keys() == c2.events.keys()
        for key in c1.events:
            np.testing.assert_array_equal(c1.events[key][0], c2.events[key][0])
            np.testing.assert_array_equal(c1.events[key][1], c2.events[key][1])


class TestIrfLibrary:
    def test_emg_has_tail(self):
        irf = emg_irf(1, sigma=2.0, tau=3.0)
        v = irf.values[0]
        peak = int(np.argmax(v))
        # exponential tail: slower decay after the peak than before
        assert v[peak + 4] > v[peak - 4]

    def test_per_band_widths(self):
        irf = gaussian_irf(3, sigma=[1.0, 2.0, 3.0], radius=12)
        sums = irf.band_sums
        assert sums[0] < sums[1] < sums[2]

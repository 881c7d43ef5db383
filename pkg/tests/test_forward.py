import numpy as np
import pytest
from helpers import (brute_force_composite, identity_pose, project_map,
                     random_map, single_splat_screen, small_intrinsics)

from splatmap.forward import (TileGrid, bin_and_sort, cull_tiles,
                              reference_render, render, _render_numpy)
from splatmap.projection import ALPHA_CUTOFF, ProjectedGaussian
from splatmap.scene import CameraIntrinsics


def dense_tile_max_alpha(screen, i, tx, ty, intr, tile_size=16):
    """Oracle: max alpha of Gaussian i over a tile's pixel centers."""
    x0, y0 = tx * tile_size, ty * tile_size
    x1 = min(x0 + tile_size, intr.width)
    y1 = min(y0 + tile_size, intr.height)
    best = 0.0
    inv = screen.inv_cov2d[i]
    for py in range(y0, y1):
        for px in range(x0, x1):
            d = screen.mean2d[i] - [px, py]
            q = float(d @ inv @ d)
            best = max(best, min(screen.opacity[i] * np.exp(-0.5 * q), 0.99))
    return best


class TestBinAndSort:
    def test_small_gaussian_single_tile(self):
        intr = small_intrinsics(64)
        # tiny splat centered well inside tile (1, 1)
        screen = single_splat_screen([24.0, 24.0], np.eye(2) * 4.0, 2.0,
                                     [1, 0, 0], 0.9, intr)
        grid = bin_and_sort(screen, intr)
        tiles = np.unique(grid.pair_tile)
        assert list(tiles) == [1 * grid.tiles_x + 1]

    def test_corner_gaussian_four_tiles(self):
        intr = small_intrinsics(64)
        screen = single_splat_screen([16.0, 16.0], np.eye(2) * 1.0, 2.0,
                                     [1, 0, 0], 0.9, intr)
        grid = bin_and_sort(screen, intr)
        assert grid.n_pairs == 4
        got = sorted(grid.pair_tile.tolist())
        tx = grid.tiles_x
        assert got == [0, 1, tx, tx + 1]

    def test_membership_against_dense_oracle(self):
        rng = np.random.default_rng(12)
        intr = small_intrinsics(64)
        gmap = random_map(rng, 200)
        screen = project_map(gmap, identity_pose(), intr)
        grid = bin_and_sort(screen, intr)
        members = set(zip(grid.pair_gaussian.tolist(), grid.pair_tile.tolist()))
        for i in range(0, len(screen), 7):
            for ty in range(grid.tiles_y):
                for tx in range(grid.tiles_x):
                    amax = dense_tile_max_alpha(screen, i, tx, ty, intr)
                    if amax >= ALPHA_CUTOFF:
                        # conservative guarantee: never dropped
                        assert (i, ty * grid.tiles_x + tx) in members

    def test_depth_sort_and_index_tiebreak(self):
        intr = small_intrinsics(64)
        screen = single_splat_screen(
            [[24.0, 24.0], [25.0, 24.0], [24.5, 24.0]], np.eye(2), [2.0, 2.0, 1.0],
            [[1, 0, 0]] * 3, [0.5, 0.5, 0.5], intr)
        grid = bin_and_sort(screen, intr)
        lst = grid.tile_list(1, 1)
        # depth 1.0 (index 2) first, then equal depths broken by index
        assert lst.tolist() == [2, 0, 1]


class TestCullTiles:
    def test_slim_gaussian_culls_off_axis(self):
        intr = CameraIntrinsics(fx=100, fy=100, cx=64, cy=64, width=128, height=128)
        inv = np.diag([1 / 100.0, 1 / 0.09])  # eigenvalues 100 and 0.09 px^2
        pg = ProjectedGaussian(mean2d=np.array([64.0, 64.0]),
                               cov2d=np.diag([100.0, 0.09]), inv_cov2d=inv,
                               depth=2.0, color=np.ones(3), opacity=0.9)
        candidates = [(tx, ty) for tx in range(8) for ty in range(8)]
        surviving = set(cull_tiles(pg, candidates, intr))
        screen = single_splat_screen([64.0, 64.0], inv, 2.0, [1, 1, 1], 0.9, intr)
        for (tx, ty) in candidates:
            amax = dense_tile_max_alpha(screen, 0, tx, ty, intr)
            if amax >= ALPHA_CUTOFF:
                assert (tx, ty) in surviving  # never drops a contributing tile
        # far off-axis rows must actually be culled
        assert (0, 0) not in surviving
        assert len(surviving) < len(candidates)

    def test_isotropic_all_survive_within_1sigma(self):
        intr = small_intrinsics(64)
        pg = ProjectedGaussian(mean2d=np.array([32.0, 32.0]),
                               cov2d=np.eye(2) * 900.0,
                               inv_cov2d=np.eye(2) / 900.0,
                               depth=2.0, color=np.ones(3), opacity=0.5)
        candidates = [(1, 1), (2, 1), (1, 2), (2, 2)]
        assert set(cull_tiles(pg, candidates, intr)) == set(candidates)

    def test_transparent_gaussian_all_culled(self):
        intr = small_intrinsics(64)
        pg = ProjectedGaussian(mean2d=np.array([32.0, 32.0]), cov2d=np.eye(2),
                               inv_cov2d=np.eye(2), depth=2.0,
                               color=np.ones(3), opacity=1.0 / 512.0)
        assert cull_tiles(pg, [(1, 1), (2, 2)], intr) == []


class TestRender:
    def test_single_gaussian_closed_form(self):
        intr = small_intrinsics(32)
        # alpha exactly 0.3 at the center pixel
        screen = single_splat_screen([16.0, 16.0], np.eye(2) * 1e-6, 2.0,
                                     [1, 0, 0], 0.3, intr)
        grid = bin_and_sort(screen, intr)
        t = render(grid, screen, intr)
        np.testing.assert_allclose(t.color[16, 16], [0.3, 0, 0], atol=1e-7)
        assert t.depth[16, 16] == pytest.approx(0.6, rel=1e-6)
        assert t.opacity[16, 16] == pytest.approx(0.3, rel=1e-6)

    def test_two_gaussian_expansion(self):
        intr = small_intrinsics(32)
        screen = single_splat_screen(
            [[16.0, 16.0], [16.0, 16.0]], np.eye(2) * 1e-6, [1.0, 2.0],
            [[1, 0, 0], [0, 0, 1]], [0.5, 1.0], intr)
        grid = bin_and_sort(screen, intr)
        t = render(grid, screen, intr)
        want = 0.5 * np.array([1, 0, 0]) + 0.5 * 0.99 * np.array([0, 0, 1])
        np.testing.assert_allclose(t.color[16, 16], want, atol=1e-7)
        assert t.opacity[16, 16] == pytest.approx(0.5 + 0.5 * 0.99, rel=1e-6)

    def test_matches_reference_on_random_scenes(self):
        rng = np.random.default_rng(77)
        intr = small_intrinsics(64)
        for _ in range(10):
            gmap = random_map(rng, 300)
            screen = project_map(gmap, identity_pose(), intr)
            grid = bin_and_sort(screen, intr)
            t1 = render(grid, screen, intr, early_termination=False)
            t2 = reference_render(screen, intr)
            assert np.abs(t1.color - t2.color).max() < 1e-5
            assert np.abs(t1.depth - t2.depth).max() < 1e-5
            assert np.abs(t1.opacity - t2.opacity).max() < 1e-5

    def test_numpy_fallback_path_matches(self):
        rng = np.random.default_rng(78)
        intr = small_intrinsics(64)
        gmap = random_map(rng, 150)
        screen = project_map(gmap, identity_pose(), intr)
        grid = bin_and_sort(screen, intr)
        t1 = render(grid, screen, intr)
        t2 = _render_numpy(grid, screen, intr)
        assert np.abs(t1.color - t2.color).max() < 1e-12
        np.testing.assert_array_equal(t1.n_contrib, t2.n_contrib)

    def test_opacity_bounds_and_transmittance(self):
        rng = np.random.default_rng(79)
        intr = small_intrinsics(48)
        gmap = random_map(rng, 200, opacity=(0.3, 0.95))
        screen = project_map(gmap, identity_pose(), intr)
        grid = bin_and_sort(screen, intr)
        t = render(grid, screen, intr)
        assert t.opacity.min() >= 0.0 and t.opacity.max() <= 1.0
        np.testing.assert_allclose(t.transmittance, 1 - t.opacity, atol=1e-6)

    def test_opacity_monotone_in_single_gaussian(self):
        intr = small_intrinsics(32)
        rng = np.random.default_rng(80)
        gmap = random_map(rng, 20, dtype=np.float64)
        base = project_map(gmap, identity_pose(), intr)
        t0 = render(bin_and_sort(base, intr), base, intr)
        gmap.opacity_logits[7] += 0.8
        bumped = project_map(gmap, identity_pose(), intr)
        t1 = render(bin_and_sort(bumped, intr), bumped, intr)
        assert (t1.opacity - t0.opacity).min() >= -1e-9

    def test_blending_weights_sum_to_opacity(self):
        rng = np.random.default_rng(81)
        intr = small_intrinsics(24)
        gmap = random_map(rng, 40, dtype=np.float64)
        screen = project_map(gmap, identity_pose(), intr)
        grid = bin_and_sort(screen, intr)
        t = render(grid, screen, intr, early_termination=False)
        _, _, O = brute_force_composite(screen, intr)
        np.testing.assert_allclose(t.opacity, O, atol=1e-9)

    def test_gaussian_behind_termination_is_invisible(self):
        intr = small_intrinsics(32)
        # ten near-opaque splats drive transmittance below 1e-4
        n = 10
        screen = single_splat_screen(
            [[16.0, 16.0]] * n, np.eye(2) * 1e-6,
            list(np.linspace(1, 2, n)), [[1, 1, 1]] * n, [0.9] * n, intr)
        grid = bin_and_sort(screen, intr)
        t0 = render(grid, screen, intr)
        assert t0.transmittance[16, 16] < 1e-4
        screen2 = single_splat_screen(
            [[16.0, 16.0]] * (n + 1), np.eye(2) * 1e-6,
            list(np.linspace(1, 2, n)) + [5.0],
            [[1, 1, 1]] * n + [[0, 1, 0]], [0.9] * (n + 1), intr)
        grid2 = bin_and_sort(screen2, intr)
        t1 = render(grid2, screen2, intr)
        np.testing.assert_array_equal(t0.color[16, 16], t1.color[16, 16])
        np.testing.assert_array_equal(t0.depth[16, 16], t1.depth[16, 16])

    def test_depth_approaches_d_when_opaque(self):
        intr = small_intrinsics(32)
        screen = single_splat_screen([16.0, 16.0], np.eye(2) * 1e-6, 3.0,
                                     [1, 1, 1], 0.9999, intr)
        grid = bin_and_sort(screen, intr)
        t = render(grid, screen, intr)
        # alpha clamps at 0.99, so D = 0.99 * d
        assert t.depth[16, 16] == pytest.approx(0.99 * 3.0, rel=1e-6)


class TestReferenceRender:
    def test_empty_scene(self):
        intr = small_intrinsics(16)
        screen = single_splat_screen(np.zeros((0, 2)), np.eye(2),
                                     np.zeros(0), np.zeros((0, 3)),
                                     np.zeros(0), intr)
        t = reference_render(screen, intr)
        assert not t.color.any() and not t.depth.any() and not t.opacity.any()

    def test_full_screen_opaque_gaussian(self):
        intr = small_intrinsics(16)
        screen = single_splat_screen([8.0, 8.0], np.eye(2) * 1e-8, 2.0,
                                     [1, 1, 1], 0.8, intr)
        t = reference_render(screen, intr)
        np.testing.assert_allclose(t.opacity, 0.8, atol=1e-6)

    def test_matches_brute_force_per_pixel_expansion(self):
        rng = np.random.default_rng(83)
        intr = small_intrinsics(24)
        gmap = random_map(rng, 30, dtype=np.float64)
        screen = project_map(gmap, identity_pose(), intr)
        t = reference_render(screen, intr)
        C, D, O = brute_force_composite(screen, intr)
        np.testing.assert_allclose(t.color, C, atol=1e-10)
        np.testing.assert_allclose(t.depth, D, atol=1e-9)
        np.testing.assert_allclose(t.opacity, O, atol=1e-10)


class TestCullingSafety:
    def test_culling_never_changes_output(self):
        rng = np.random.default_rng(84)
        intr = small_intrinsics(64)
        gmap = random_map(rng, 150, scale=(0.01, 0.6))
        # make them slim
        gmap.log_scales[:, 0] += np.log(30.0)
        screen = project_map(gmap, identity_pose(), intr)
        g_on = bin_and_sort(screen, intr, cull=True)
        g_off = bin_and_sort(screen, intr, cull=False)
        assert g_on.n_pairs < g_off.n_pairs
        t_on = render(g_on, screen, intr)
        t_off = render(g_off, screen, intr)
        assert np.abs(t_on.color - t_off.color).max() <= 2e-4

"""Tests for coarse-to-fine change detection."""
import numpy as np
import pytest

from cloudchange.detection import (
    DEFAULT_THRESHOLD,
    ChangeParams,
    component_filter,
    density_feature,
    feature_distance,
    hierarchical_detect,
)
from cloudchange.geometry import BoundingCube, PointCloud, bounding_cube
from cloudchange.octree import cell_bounds, morton_codes
from scenes import hollow_box, removal_scene


class TestDensityFeature:
    def test_one_point_per_octant(self):
        cube = BoundingCube(np.zeros(3), 1.0)
        centers = np.array(
            [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64
        ) * 0.5 + 0.25
        feat = density_feature(cube, PointCloud(centers), 2)
        assert feat.subvoxels_per_axis == 2
        np.testing.assert_allclose(feat.densities, 8.0)

    def test_single_cell_is_plain_density(self):
        cube = BoundingCube(np.zeros(3), 2.0)
        rng = np.random.default_rng(3)
        pts = rng.uniform(0.0, 2.0, (40, 3))
        feat = density_feature(cube, pts, 1)
        assert feat.densities.shape == (1,)
        assert feat.densities[0] == pytest.approx(40 / 8.0)

    def test_outside_points_ignored(self):
        cube = BoundingCube(np.zeros(3), 1.0)
        pts = np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [-0.1, 0.5, 0.5]])
        feat = density_feature(cube, pts, 1)
        assert feat.densities[0] == pytest.approx(1.0)

    def test_max_corner_point_lands_in_last_subvoxel(self):
        cube = BoundingCube(np.zeros(3), 1.0)
        feat = density_feature(cube, np.array([[1.0, 1.0, 1.0]]), 2)
        assert feat.densities[-1] == pytest.approx(8.0)
        assert feat.densities[:-1].sum() == 0.0

    def test_matches_direct_binning(self):
        rng = np.random.default_rng(7)
        cube = BoundingCube(np.array([-1.0, 2.0, 0.5]), 3.0)
        pts = cube.min_corner + rng.uniform(0.0, 1.0, (500, 3)) * cube.edge
        m = 3
        feat = density_feature(cube, pts, m)
        idx = np.floor((pts - cube.min_corner) / (cube.edge / m)).astype(int)
        idx = np.clip(idx, 0, m - 1)
        counts = np.zeros(m**3)
        for i, j, k in idx:
            counts[(i * m + j) * m + k] += 1
        np.testing.assert_allclose(feat.densities, counts / (cube.edge / m) ** 3)

    def test_distance_normalization(self):
        cube = BoundingCube(np.zeros(3), 1.0)
        centers = np.array(
            [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64
        ) * 0.5 + 0.25
        full = density_feature(cube, centers, 2)
        half = density_feature(cube, centers[:4], 2)
        # Four octants emptied, each contributing 8^2.
        assert feature_distance(full, half) == pytest.approx(4 * 64 / 8)
        assert feature_distance(full, half, normalized=False) == pytest.approx(4 * 64)
        assert feature_distance(full, full) == 0.0

    def test_mismatched_m_rejected(self):
        cube = BoundingCube(np.zeros(3), 1.0)
        pts = np.array([[0.5, 0.5, 0.5]])
        with pytest.raises(ValueError, match="feature sizes differ"):
            feature_distance(density_feature(cube, pts, 2), density_feature(cube, pts, 3))

    def test_bad_m_rejected(self):
        with pytest.raises(ValueError, match="m must be"):
            density_feature(BoundingCube(np.zeros(3), 1.0), np.zeros((1, 3)), 0)


class TestChangeParams:
    def test_defaults_valid(self):
        params = ChangeParams()
        assert params.start_depth == 7
        assert params.max_depth == 11
        assert params.threshold_at(7) == DEFAULT_THRESHOLD
        assert params.threshold_at(11) == DEFAULT_THRESHOLD

    def test_per_depth_thresholds(self):
        params = ChangeParams(start_depth=3, max_depth=5, thresholds=[10.0, 20.0, 30.0])
        assert params.threshold_at(3) == 10.0
        assert params.threshold_at(4) == 20.0
        assert params.threshold_at(5) == 30.0

    def test_depth_order_rejected(self):
        with pytest.raises(ValueError, match="start_depth"):
            ChangeParams(start_depth=8, max_depth=7)

    def test_excessive_depth_rejected(self):
        with pytest.raises(ValueError, match="max_depth"):
            ChangeParams(max_depth=22)

    def test_threshold_count_rejected(self):
        with pytest.raises(ValueError, match="thresholds"):
            ChangeParams(start_depth=3, max_depth=5, thresholds=[1.0, 2.0])

    def test_nonpositive_threshold_rejected(self):
        with pytest.raises(ValueError, match="thresholds"):
            ChangeParams(thresholds=0.0)

    def test_component_params_rejected(self):
        with pytest.raises(ValueError, match="component_radius"):
            ChangeParams(component_radius=-1.0)
        with pytest.raises(ValueError, match="component_min_size"):
            ChangeParams(component_min_size=0)


def brute_force_components(points, radius, min_size):
    """Union-find single linkage; same canonical labelling as the library."""
    n = len(points)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(points[i] - points[j]) <= radius:
                parent[find(i)] = find(j)
    roots = np.array([find(i) for i in range(n)])
    sizes = {r: int((roots == r).sum()) for r in set(roots)}
    kept = np.array([i for i in range(n) if sizes[roots[i]] >= min_size], dtype=np.int64)
    if not len(kept):
        return kept, np.empty(0, dtype=np.int64)
    rank = np.empty(n, dtype=np.int64)
    rank[np.lexsort((points[:, 2], points[:, 1], points[:, 0]))] = np.arange(n)
    first = {}
    for i in kept:
        r = roots[i]
        if r not in first or rank[i] < first[r]:
            first[r] = rank[i]
    order = {r: pos for pos, (r, _) in enumerate(sorted(first.items(), key=lambda kv: kv[1]))}
    return kept, np.array([order[roots[i]] for i in kept], dtype=np.int64)


class TestComponentFilter:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for trial in range(5):
            centers = rng.uniform(0.0, 10.0, (4, 3))
            pts = np.vstack([c + rng.normal(0.0, 0.2, (rng.integers(3, 40), 3)) for c in centers])
            radius = float(rng.uniform(0.3, 1.5))
            min_size = int(rng.integers(1, 10))
            kept, labels = component_filter(pts, radius, min_size)
            kept_bf, labels_bf = brute_force_components(pts, radius, min_size)
            np.testing.assert_array_equal(kept, kept_bf)
            np.testing.assert_array_equal(labels, labels_bf)

    def test_small_cluster_dropped(self):
        rng = np.random.default_rng(12)
        pts = np.vstack(
            [rng.normal(0.0, 0.1, (100, 3)), rng.normal(10.0, 0.1, (10, 3))]
        )
        kept, labels = component_filter(pts, radius=1.0, min_size=50)
        assert (kept < 100).all() and len(kept) == 100
        assert (labels == 0).all()
        kept, labels = component_filter(pts, radius=1.0, min_size=5)
        assert len(kept) == 110
        assert set(labels[kept < 100]) == {0} and set(labels[kept >= 100]) == {1}

    def test_order_invariant(self):
        rng = np.random.default_rng(13)
        pts = np.vstack([rng.normal(0.0, 0.3, (60, 3)), rng.normal(5.0, 0.3, (60, 3))])
        kept, labels = component_filter(pts, 1.0, 10)
        perm = rng.permutation(len(pts))
        kept_p, labels_p = component_filter(pts[perm], 1.0, 10)
        back = {int(perm[i]): int(labels_p[pos]) for pos, i in enumerate(kept_p)}
        assert sorted(back) == sorted(int(i) for i in kept)
        assert all(back[int(i)] == int(l) for i, l in zip(kept, labels))

    def test_zero_radius_gives_singletons(self):
        pts = np.arange(12, dtype=np.float64).reshape(4, 3)
        kept, labels = component_filter(pts, 0.0, 1)
        assert len(kept) == 4
        kept, _ = component_filter(pts, 0.0, 2)
        assert len(kept) == 0

    def test_empty_input(self):
        kept, labels = component_filter(np.empty((0, 3)), 1.0, 1)
        assert len(kept) == 0 and len(labels) == 0

    def test_bad_args_rejected(self):
        pts = np.zeros((2, 3))
        with pytest.raises(ValueError, match="radius"):
            component_filter(pts, -0.5, 1)
        with pytest.raises(ValueError, match="min_size"):
            component_filter(pts, 1.0, 0)


class TestHierarchicalDetect:
    def test_identical_clouds_unchanged(self):
        rng = np.random.default_rng(21)
        for trial in range(5):
            cloud = PointCloud(rng.uniform(-50.0, 50.0, (rng.integers(100, 3000), 3)))
            result = hierarchical_detect(cloud, cloud)
            assert result.n_voxels == 0
            assert len(result.changed_reference) == 0
            assert len(result.changed_other) == 0

    def test_removed_patch_found(self):
        rng = np.random.default_rng(22)
        ref, oth, removed = removal_scene(rng, density=400.0)
        params = ChangeParams(thresholds=1e4, component_min_size=1)
        result = hierarchical_detect(ref, oth, params)
        pred = np.zeros(len(ref), dtype=bool)
        pred[result.raw_changed_reference] = True
        tp = (pred & removed).sum()
        assert tp / max(pred.sum(), 1) > 0.99
        assert tp / removed.sum() > 0.99
        assert len(result.raw_changed_other) < 0.01 * len(oth)

    def test_default_params_on_removal_scene(self):
        rng = np.random.default_rng(23)
        ref, oth, removed = removal_scene(rng, density=400.0)
        result = hierarchical_detect(ref, oth)
        pred = np.zeros(len(ref), dtype=bool)
        pred[result.changed_reference] = True
        tp = (pred & removed).sum()
        assert tp / max(pred.sum(), 1) > 0.9
        assert tp / removed.sum() > 0.9

    def test_added_material_in_empty_space_found(self):
        rng = np.random.default_rng(24)
        corners = np.vstack(
            [rng.uniform(0.0, 2.0, (500, 3)), rng.uniform(18.0, 20.0, (500, 3))]
        )
        added = rng.uniform(12.6, 14.6, (300, 3))
        ref = PointCloud(corners)
        oth = PointCloud(np.vstack([corners, added]))
        # Empty-space cells are scored once at their own, coarse bounds, so
        # tau must sit below the added cluster's density diluted over a
        # coarse cell (300 points in a ~15 m^3 sub-voxel score about 46).
        params = ChangeParams(
            start_depth=6, max_depth=8, thresholds=0.1, component_min_size=10
        )
        result = hierarchical_detect(ref, oth, params)
        assert len(result.changed_reference) == 0
        flagged = np.zeros(len(oth), dtype=bool)
        flagged[result.changed_other] = True
        assert flagged[1000:].all()
        assert not flagged[:1000].any()

    def test_other_points_outside_cube_ignored(self):
        rng = np.random.default_rng(25)
        base = rng.uniform(0.0, 10.0, (800, 3))
        far = rng.uniform(100.0, 101.0, (50, 3))
        result = hierarchical_detect(
            PointCloud(base),
            PointCloud(np.vstack([base, far])),
            ChangeParams(thresholds=10.0, component_min_size=1),
        )
        assert result.n_voxels == 0
        assert len(result.raw_changed_other) == 0

    def test_coarse_start_contained_in_direct_start(self):
        rng = np.random.default_rng(26)
        ref, oth, _ = removal_scene(rng, density=400.0)
        coarse = ChangeParams(start_depth=5, max_depth=9, thresholds=1e4, component_min_size=1)
        direct = ChangeParams(start_depth=9, max_depth=9, thresholds=1e4, component_min_size=1)
        k_coarse = hierarchical_detect(ref, oth, coarse).voxel_codes
        k_direct = hierarchical_detect(ref, oth, direct).voxel_codes
        assert np.isin(k_coarse, k_direct).all()

    def test_monotone_pruning(self):
        rng = np.random.default_rng(27)
        for trial in range(2):
            ref, oth, _ = removal_scene(rng, density=float(rng.uniform(300, 900)))
            previous = None
            for tau in [1e3, 1e4, 1e5, 1e6, 1e8]:
                params = ChangeParams(
                    start_depth=5, max_depth=9, thresholds=tau, component_min_size=1
                )
                codes = set(hierarchical_detect(ref, oth, params).voxel_codes.tolist())
                if previous is not None:
                    assert codes <= previous
                previous = codes

    def test_pure_sum_equivalent_to_scaled_threshold(self):
        rng = np.random.default_rng(28)
        ref, oth, _ = removal_scene(rng, density=400.0)
        normalized = ChangeParams(
            start_depth=5, max_depth=8, thresholds=2e4, component_min_size=1
        )
        pure = ChangeParams(
            start_depth=5, max_depth=8, thresholds=2e4 * 8, normalized=False,
            component_min_size=1,
        )
        a = hierarchical_detect(ref, oth, normalized)
        b = hierarchical_detect(ref, oth, pure)
        np.testing.assert_array_equal(a.voxel_codes, b.voxel_codes)

    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_matches_per_cell_scoring(self, m):
        # With a reference occupying every cell, the walk degenerates to
        # scoring all cells at max_depth, so the survivor set must equal
        # direct per-cell feature comparison.
        rng = np.random.default_rng(29)
        ref_pts = rng.uniform(0.0, 8.0, (6000, 3))
        keep = ~((ref_pts >= [2.0, 2.0, 2.0]) & (ref_pts <= [4.0, 3.0, 4.0])).all(axis=1)
        oth_pts = np.vstack([ref_pts[keep], rng.uniform(5.0, 7.0, (200, 3))])
        ref, oth = PointCloud(ref_pts), PointCloud(oth_pts)
        depth, tau = 2, 50.0
        params = ChangeParams(
            start_depth=depth, max_depth=depth, subvoxels_per_axis=m,
            thresholds=tau, component_min_size=1,
        )
        result = hierarchical_detect(ref, oth, params)
        cube = bounding_cube(ref)
        expected = []
        for code in range(8**depth):
            corners, edge = cell_bounds(cube, np.array([code], dtype=np.uint64), depth)
            cell = BoundingCube(corners[0], edge)
            score = feature_distance(
                density_feature(cell, ref, m), density_feature(cell, oth, m)
            )
            if score >= tau:
                expected.append(code)
        np.testing.assert_array_equal(result.voxel_codes, np.array(expected, dtype=np.uint64))

    def test_contains_matches_raw_indices(self):
        rng = np.random.default_rng(30)
        ref, oth, _ = removal_scene(rng, density=400.0)
        params = ChangeParams(thresholds=1e4, component_min_size=1)
        result = hierarchical_detect(ref, oth, params)
        np.testing.assert_array_equal(
            np.flatnonzero(result.contains(ref.xyz)), result.raw_changed_reference
        )
        np.testing.assert_array_equal(
            np.flatnonzero(result.contains(oth.xyz)), result.raw_changed_other
        )

    def test_voxel_geometry(self):
        rng = np.random.default_rng(31)
        ref, oth, _ = removal_scene(rng, density=400.0)
        params = ChangeParams(start_depth=5, max_depth=7, thresholds=1e4, component_min_size=1)
        result = hierarchical_detect(ref, oth, params)
        assert result.voxel_edge == pytest.approx(result.cube.edge / 2**7)
        bounds = result.voxel_bounds()
        assert len(bounds) == result.n_voxels
        centers = result.voxel_centers
        for cube, center in zip(bounds, centers):
            assert cube.contains(center[None, :]).all()
            assert cube.edge == pytest.approx(result.voxel_edge)

    def test_empty_cloud_rejected(self):
        cloud = PointCloud(np.zeros((5, 3)))
        empty = PointCloud(np.empty((0, 3)))
        with pytest.raises(ValueError, match="nonempty"):
            hierarchical_detect(cloud, empty)
        with pytest.raises(ValueError, match="nonempty"):
            hierarchical_detect(empty, cloud)

    def test_provenance_fields(self):
        rng = np.random.default_rng(32)
        cloud = PointCloud(rng.uniform(0.0, 5.0, (200, 3)))
        result = hierarchical_detect(cloud, cloud, epoch_pair=(3, 4))
        assert result.epoch_pair == (3, 4)
        assert result.reference_size == 200
        assert result.other_size == 200
        assert result.params.max_depth == 11


class TestThresholdDefault:
    """Empirical placement of DEFAULT_THRESHOLD.

    With consistent sampling of unchanged surfaces the score of an unchanged
    cell is exactly zero, so the default only has to sit well below the score
    of genuinely emptied cells at the coarsest scored depth, across the
    density range the volume tests use (400..1600 pts/m^2).
    """

    @pytest.mark.parametrize("density", [400.0, 1600.0])
    def test_emptied_cells_score_far_above_default(self, density):
        rng = np.random.default_rng(41)
        box_lo, box_hi = np.array([5.0, -0.1, 2.0]), np.array([10.0, 0.1, 5.0])
        ref, oth, removed = removal_scene(rng, density, box_lo, box_hi)
        cube = bounding_cube(ref)
        depth = ChangeParams().start_depth
        # Fully emptied cells: every reference point they held was removed,
        # so the later epoch contributes an all-zero feature there.
        all_codes = np.sort(morton_codes(ref.xyz, cube, depth))
        removed_codes = np.sort(morton_codes(ref.xyz[removed], cube, depth))
        candidates = np.unique(removed_codes)
        n_total = np.searchsorted(all_codes, candidates + 1) - np.searchsorted(all_codes, candidates)
        n_removed = np.searchsorted(removed_codes, candidates + 1) - np.searchsorted(
            removed_codes, candidates
        )
        emptied = candidates[n_total == n_removed]
        corners, edge = cell_bounds(cube, emptied, depth)
        gone = ref.xyz[removed]
        empty = np.empty((0, 3))
        scores = []
        for corner in corners:
            cell = BoundingCube(corner, edge)
            scores.append(
                feature_distance(density_feature(cell, gone, 2), density_feature(cell, empty, 2))
            )
        scores = np.array(scores)
        assert len(scores) >= 100
        assert scores.min() >= DEFAULT_THRESHOLD
        assert np.median(scores) >= 10 * DEFAULT_THRESHOLD

    def test_unchanged_cells_score_zero(self):
        rng = np.random.default_rng(42)
        pts = hollow_box(rng, density=1600.0)
        cloud = PointCloud(pts)
        tiny = ChangeParams(thresholds=DEFAULT_THRESHOLD / 1000.0)
        assert hierarchical_detect(cloud, cloud, tiny).n_voxels == 0

    def test_default_detects_removal_at_both_densities(self):
        rng = np.random.default_rng(43)
        for density in (400.0, 1600.0):
            ref, oth, removed = removal_scene(rng, density)
            result = hierarchical_detect(ref, oth)
            pred = np.zeros(len(ref), dtype=bool)
            pred[result.changed_reference] = True
            tp = (pred & removed).sum()
            assert tp / max(pred.sum(), 1) > 0.9
            assert tp / removed.sum() > 0.9

"""Coarse-to-fine volumetric change detection between two epochs.

The earlier (reference) epoch's bounding cube fixes the voxel lattice. Each
candidate cell is scored by the squared difference of sub-voxel point
densities between the epochs; only cells above threshold are subdivided, so
unchanged space is discarded at coarse scale and changed space is located at
the finest scale. A connected-component pass then drops isolated flagged
points.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .geometry import BoundingCube, PointCloud, bounding_cube
from .neighbors import kdtree
from .octree import MAX_SUPPORTED_DEPTH, cell_bounds, morton_codes

logger = logging.getLogger(__name__)

# Default score threshold in (points/m^3)^2, calibrated on the synthetic
# demolition suite (see tests/test_detection.py::TestThresholdDefault for the
# margin check); tau must sit above resampling noise at the coarse depth and
# below the score of genuinely emptied cells.
DEFAULT_THRESHOLD = 3.0e5


@dataclass(frozen=True)
class DensityFeature:
    """Sub-voxel point densities of one cell volume.

    Attributes:
        densities: (m^3,) points per cubic metre, x-major sub-voxel order
            (index = (ix * m + iy) * m + iz).
        subvoxels_per_axis: m.
    """

    densities: np.ndarray
    subvoxels_per_axis: int


@dataclass
class ChangeParams:
    """Knobs of hierarchical_detect.

    Attributes:
        start_depth: octree depth where scoring begins.
        max_depth: finest depth; surviving cells at this depth form the
            changed-voxel set.
        subvoxels_per_axis: m of the density feature (2 aligns sub-voxels
            with octree children).
        thresholds: scalar tau applied at every depth, or one value per
            depth from start_depth to max_depth.
        normalized: divide the squared-difference sum by the sub-voxel
            count (keeps tau comparable across m).
        component_radius: single-linkage radius of the component filter in
            metres; None picks max(1.5 * finest cell edge, 3 * median
            nearest-neighbour spacing of the flagged points).
        component_min_size: clusters smaller than this are discarded.
    """

    start_depth: int = 7
    max_depth: int = 11
    subvoxels_per_axis: int = 2
    thresholds: Union[float, Sequence[float]] = DEFAULT_THRESHOLD
    normalized: bool = True
    component_radius: Optional[float] = None
    component_min_size: int = 50

    def __post_init__(self) -> None:
        if not 1 <= self.start_depth <= self.max_depth <= MAX_SUPPORTED_DEPTH:
            raise ValueError(
                f"need 1 <= start_depth <= max_depth <= {MAX_SUPPORTED_DEPTH}, "
                f"got start={self.start_depth} max={self.max_depth}"
            )
        if self.subvoxels_per_axis < 1:
            raise ValueError(f"subvoxels_per_axis must be >= 1, got {self.subvoxels_per_axis}")
        taus = np.atleast_1d(np.asarray(self.thresholds, dtype=np.float64))
        if (taus <= 0).any():
            raise ValueError("thresholds must be > 0")
        n_depths = self.max_depth - self.start_depth + 1
        if taus.size not in (1, n_depths):
            raise ValueError(
                f"thresholds must be scalar or give one value per depth "
                f"({n_depths} for depths {self.start_depth}..{self.max_depth}), got {taus.size}"
            )
        if self.component_radius is not None and self.component_radius <= 0:
            raise ValueError("component_radius must be > 0")
        if self.component_min_size < 1:
            raise ValueError("component_min_size must be >= 1")

    def threshold_at(self, depth: int) -> float:
        taus = np.atleast_1d(np.asarray(self.thresholds, dtype=np.float64))
        if taus.size == 1:
            return float(taus[0])
        return float(taus[np.clip(depth - self.start_depth, 0, taus.size - 1)])


@dataclass
class ChangeSet:
    """Result of hierarchical_detect for one epoch pair.

    Attributes:
        cube: the reference epoch's bounding cube (the voxel lattice root).
        depth: depth of the changed voxels (params.max_depth).
        voxel_codes: sorted Morton codes of the changed voxels at `depth`.
        voxel_edge: edge length of those voxels, metres.
        raw_changed_reference / raw_changed_other: indices of each epoch's
            points inside the changed voxels, before component filtering.
        changed_reference / changed_other: the filtered subsets.
        component_labels_reference / _other: cluster id per filtered point.
        params, epoch_pair, reference_size, other_size: provenance.
    """

    cube: BoundingCube
    depth: int
    voxel_codes: np.ndarray
    voxel_edge: float
    raw_changed_reference: np.ndarray
    raw_changed_other: np.ndarray
    changed_reference: np.ndarray
    changed_other: np.ndarray
    component_labels_reference: np.ndarray
    component_labels_other: np.ndarray
    params: ChangeParams
    epoch_pair: Tuple = (0, 1)
    reference_size: int = 0
    other_size: int = 0

    @property
    def n_voxels(self) -> int:
        return len(self.voxel_codes)

    @property
    def voxel_centers(self) -> np.ndarray:
        corners, edge = cell_bounds(self.cube, self.voxel_codes, self.depth)
        return corners + 0.5 * edge

    def voxel_bounds(self) -> List[BoundingCube]:
        corners, edge = cell_bounds(self.cube, self.voxel_codes, self.depth)
        return [BoundingCube(c, edge) for c in corners]

    def contains(self, points) -> np.ndarray:
        """Mask of points lying inside some changed voxel."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside_cube = np.logical_and(
            (pts >= self.cube.min_corner).all(axis=1),
            (pts <= self.cube.max_corner).all(axis=1),
        )
        mask = np.zeros(len(pts), dtype=bool)
        if not len(self.voxel_codes) or not inside_cube.any():
            return mask
        codes = morton_codes(pts[inside_cube], self.cube, self.depth)
        pos = np.searchsorted(self.voxel_codes, codes)
        pos = np.minimum(pos, len(self.voxel_codes) - 1)
        mask[inside_cube] = self.voxel_codes[pos] == codes
        return mask


def density_feature(bounds: BoundingCube, cloud, m: int = 2) -> DensityFeature:
    """Point densities over the m^3 sub-voxels of `bounds`.

    Membership in `bounds` is inclusive of all faces; within the cell,
    points on an interior sub-voxel boundary go to the higher sub-voxel and
    the cell's own max face belongs to the last sub-voxel, matching octree
    cell assignment. Points outside `bounds` are ignored.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    pts = cloud.xyz if isinstance(cloud, PointCloud) else np.atleast_2d(np.asarray(cloud, dtype=np.float64))
    inside = bounds.contains(pts)
    pts = pts[inside]
    sub_edge = bounds.edge / m
    counts = np.zeros(m ** 3, dtype=np.int64)
    if len(pts):
        idx = np.floor((pts - bounds.min_corner) / sub_edge).astype(np.int64)
        np.clip(idx, 0, m - 1, out=idx)
        flat = (idx[:, 0] * m + idx[:, 1]) * m + idx[:, 2]
        counts = np.bincount(flat, minlength=m ** 3)
    return DensityFeature(counts / sub_edge ** 3, m)


def feature_distance(a: DensityFeature, b: DensityFeature, normalized: bool = True) -> float:
    """Squared-difference score between two density features.

    Sum over sub-voxels of (density_b - density_a)^2, divided by the
    sub-voxel count when `normalized`.
    """
    if a.subvoxels_per_axis != b.subvoxels_per_axis:
        raise ValueError(
            f"feature sizes differ: m={a.subvoxels_per_axis} vs m={b.subvoxels_per_axis}"
        )
    d = float(((b.densities - a.densities) ** 2).sum())
    if normalized:
        d /= len(a.densities)
    return d


class _CodeIndex:
    """Sorted max-resolution Morton codes of one cloud, with range counts."""

    def __init__(self, points: np.ndarray, cube: BoundingCube, code_depth: int) -> None:
        inside = np.logical_and(
            (points >= cube.min_corner).all(axis=1),
            (points <= cube.min_corner + cube.edge).all(axis=1),
        )
        self.original_indices = np.flatnonzero(inside)
        kept = points[inside]
        codes = morton_codes(kept, cube, code_depth)
        order = np.argsort(codes, kind="stable")
        self.sorted_codes = codes[order]
        self.original_indices = self.original_indices[order]
        self.points = kept[order]
        self.code_depth = code_depth
        self.n_outside = int(len(points) - inside.sum())

    def block_counts(self, cells: np.ndarray, depth: int, levels: int) -> np.ndarray:
        """(len(cells), 8**levels) point counts of each cell's descendants
        `levels` below `depth`, in Morton child order."""
        shift = np.uint64(3 * (self.code_depth - depth - levels))
        base = cells.astype(np.uint64) << np.uint64(3 * levels)
        offsets = np.arange(8 ** levels + 1, dtype=np.uint64)
        edges = (base[:, None] + offsets[None, :]) << shift
        pos = np.searchsorted(self.sorted_codes, edges.ravel()).reshape(edges.shape)
        return np.diff(pos, axis=1)

    def members(self, cells: np.ndarray, depth: int) -> np.ndarray:
        """Original indices of points inside any of the given cells."""
        shift = np.uint64(3 * (self.code_depth - depth))
        cells = np.asarray(cells, dtype=np.uint64)
        lo = np.searchsorted(self.sorted_codes, cells << shift)
        hi = np.searchsorted(self.sorted_codes, (cells + np.uint64(1)) << shift)
        if not len(cells):
            return np.empty(0, dtype=np.int64)
        spans = [self.original_indices[a:b] for a, b in zip(lo, hi)]
        out = np.concatenate(spans) if spans else np.empty(0, dtype=np.int64)
        out.sort()
        return out


def _score_cells(
    ref: _CodeIndex,
    oth: _CodeIndex,
    cells: np.ndarray,
    depth: int,
    cube: BoundingCube,
    m: int,
    normalized: bool,
) -> np.ndarray:
    """Density-difference score of each cell at `depth`."""
    cell_edge = cube.edge / float(1 << depth)
    sub_volume = (cell_edge / m) ** 3
    levels = int(m).bit_length() - 1
    fast = m == (1 << levels) and depth + levels <= ref.code_depth
    if fast:
        counts_ref = ref.block_counts(cells, depth, levels)
        counts_oth = oth.block_counts(cells, depth, levels)
    else:
        # General m: extract each cell's points by code range, bin directly.
        counts_ref = np.zeros((len(cells), m ** 3), dtype=np.int64)
        counts_oth = np.zeros((len(cells), m ** 3), dtype=np.int64)
        corners, _ = cell_bounds(cube, cells, depth)
        cells64 = np.asarray(cells, dtype=np.uint64)
        for row, corner in enumerate(corners):
            for index, out in ((ref, counts_ref), (oth, counts_oth)):
                shift = np.uint64(3 * (index.code_depth - depth))
                lo = np.searchsorted(index.sorted_codes, cells64[row] << shift)
                hi = np.searchsorted(index.sorted_codes, (cells64[row] + np.uint64(1)) << shift)
                pts = index.points[lo:hi]
                if len(pts):
                    idx = np.floor((pts - corner) / (cell_edge / m)).astype(np.int64)
                    np.clip(idx, 0, m - 1, out=idx)
                    flat = (idx[:, 0] * m + idx[:, 1]) * m + idx[:, 2]
                    out[row] = np.bincount(flat, minlength=m ** 3)
    diff = (counts_oth - counts_ref).astype(np.float64) / sub_volume
    score = (diff ** 2).sum(axis=1)
    if normalized:
        score /= m ** 3
    return score


def hierarchical_detect(
    reference: PointCloud,
    other: PointCloud,
    params: Optional[ChangeParams] = None,
    epoch_pair: Tuple = (0, 1),
) -> ChangeSet:
    """Locate changed voxels between `reference` (earlier) and `other`.

    The voxel lattice derives from the reference cloud's bounding cube;
    `other` points outside that cube can never be flagged. Scoring starts at
    params.start_depth on the reference octree's cells (reference-empty
    leaves are scored once at their own bounds) and descends only into cells
    whose score reaches the depth's threshold.
    """
    params = params or ChangeParams()
    if len(reference) == 0 or len(other) == 0:
        raise ValueError("both epochs must be nonempty")
    cube = bounding_cube(reference)
    m = params.subvoxels_per_axis
    levels = max(int(m).bit_length() - 1, 1)
    code_depth = min(params.max_depth + levels, MAX_SUPPORTED_DEPTH)
    ref = _CodeIndex(reference.xyz, cube, code_depth)
    oth = _CodeIndex(other.xyz, cube, code_depth)
    if oth.n_outside:
        logger.info(
            "%d other-epoch points fall outside the reference cube and are not considered",
            oth.n_outside,
        )

    # Seed: walk the reference octree structure down to start_depth. Cells
    # the reference occupies keep subdividing; reference-empty cells are
    # terminal leaves, scored once at their own bounds (their score is zero
    # unless the other epoch has points there).
    work: dict[int, list] = {d: [] for d in range(1, params.max_depth + 1)}
    frontier = np.zeros(1, dtype=np.uint64)
    for d in range(params.start_depth):
        children = ((frontier << np.uint64(3))[:, None] + np.arange(8, dtype=np.uint64)).ravel()
        ref_counts = ref.block_counts(frontier, d, 1).ravel()
        if d + 1 == params.start_depth:
            work[d + 1].append(children)
        else:
            work[d + 1].append(children[ref_counts == 0])
            frontier = children[ref_counts > 0]

    changed = []
    for depth in range(1, params.max_depth + 1):
        buckets = [b for b in work[depth] if len(b)]
        if not buckets:
            continue
        cells = np.unique(np.concatenate(buckets))
        score = _score_cells(ref, oth, cells, depth, cube, m, params.normalized)
        survivors = cells[score >= params.threshold_at(depth)]
        if depth == params.max_depth:
            changed.append(survivors)
        elif len(survivors):
            kids = ((survivors << np.uint64(3))[:, None] + np.arange(8, dtype=np.uint64)).ravel()
            work[depth + 1].append(kids)

    voxels = np.concatenate(changed) if changed else np.empty(0, dtype=np.uint64)
    voxels = np.unique(voxels)
    raw_ref = ref.members(voxels, params.max_depth)
    raw_oth = oth.members(voxels, params.max_depth)

    finest_edge = cube.edge / float(1 << params.max_depth)
    kept_ref, labels_ref = _filter_epoch(reference.xyz, raw_ref, finest_edge, params)
    kept_oth, labels_oth = _filter_epoch(other.xyz, raw_oth, finest_edge, params)

    return ChangeSet(
        cube=cube,
        depth=params.max_depth,
        voxel_codes=voxels,
        voxel_edge=finest_edge,
        raw_changed_reference=raw_ref,
        raw_changed_other=raw_oth,
        changed_reference=kept_ref,
        changed_other=kept_oth,
        component_labels_reference=labels_ref,
        component_labels_other=labels_oth,
        params=params,
        epoch_pair=epoch_pair,
        reference_size=len(reference),
        other_size=len(other),
    )


def _auto_radius(points: np.ndarray, finest_edge: float) -> float:
    """Component radius: no smaller than typical point spacing."""
    base = 1.5 * finest_edge
    if len(points) < 2:
        return base
    sample = points
    if len(sample) > 5000:
        step = len(sample) // 5000
        sample = sample[::step]
    dist, _ = kdtree(points).query(sample, k=2)
    spacing = float(np.median(dist[:, 1]))
    return max(base, 3.0 * spacing)


def _filter_epoch(points: np.ndarray, raw_indices: np.ndarray, finest_edge: float, params: ChangeParams):
    if not len(raw_indices):
        return raw_indices.copy(), np.empty(0, dtype=np.int64)
    pts = points[raw_indices]
    radius = params.component_radius
    if radius is None:
        radius = _auto_radius(pts, finest_edge)
    kept_local, labels = component_filter(pts, radius, params.component_min_size)
    return raw_indices[kept_local], labels


def component_filter(points, radius: float, min_size: int):
    """Single-linkage clusters of `points`; drop clusters below `min_size`.

    Points within `radius` (inclusive) are connected. Returns (indices of
    surviving points, cluster label per surviving point). Labels are
    assigned by each cluster's lexicographically smallest coordinate, so the
    result is invariant under input ordering.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(pts)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if min_size < 1:
        raise ValueError(f"min_size must be >= 1, got {min_size}")
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    pairs = kdtree(pts).query_pairs(radius, output_type="ndarray")
    graph = sparse.coo_matrix(
        (np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
    )
    _, labels = connected_components(graph, directed=False)
    sizes = np.bincount(labels)
    keep = sizes[labels] >= min_size
    kept = np.flatnonzero(keep)
    if not len(kept):
        return kept, np.empty(0, dtype=np.int64)
    # Canonical labels: clusters ordered by their smallest point under
    # lexicographic (x, y, z) comparison.
    rank = np.empty(n, dtype=np.int64)
    rank[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))] = np.arange(n)
    cluster_ids = labels[kept]
    min_rank = {}
    for cid, r in zip(cluster_ids, rank[kept]):
        if cid not in min_rank or r < min_rank[cid]:
            min_rank[cid] = r
    order = {cid: i for i, (cid, _) in enumerate(sorted(min_rank.items(), key=lambda kv: kv[1]))}
    new_labels = np.asarray([order[cid] for cid in cluster_ids], dtype=np.int64)
    return kept, new_labels

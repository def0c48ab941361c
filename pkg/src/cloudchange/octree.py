"""Octree partitioning of a point cloud's bounding cube.

The tree is stored as a permutation of point indices sorted by Morton code;
every node is a contiguous span of that permutation, so children are located
by binary search and materialized lazily. One quantisation at the maximum
depth defines cell membership at every coarser depth (prefix of the code),
which keeps parent/child assignment consistent to the last ulp.
"""
from __future__ import annotations

from typing import List, Optional

import numpy as np

from .geometry import BoundingCube, PointCloud, bounding_cube

MAX_SUPPORTED_DEPTH = 21  # 3 * 21 = 63 Morton bits in a uint64


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Spread the low 21 bits of each value: bit i moves to bit 3*i."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    """Inverse of _spread_bits."""
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def cell_indices(points: np.ndarray, cube: BoundingCube, depth: int) -> np.ndarray:
    """Integer grid cell of each point at `depth` (2^depth cells per axis).

    Cells are half-open; a point exactly on an interior face lands in the
    higher-index cell, and the cube's own max boundary is closed (clamped).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n_cells = 1 << depth
    scaled = (pts - cube.min_corner) * (n_cells / cube.edge)
    idx = np.floor(scaled).astype(np.int64)
    np.clip(idx, 0, n_cells - 1, out=idx)
    return idx


def morton_codes(points: np.ndarray, cube: BoundingCube, depth: int) -> np.ndarray:
    """Morton (z-order) code of each point's cell at `depth`.

    The code of a coarser ancestor cell is `code >> 3 * (depth - d)`.
    """
    if not 0 <= depth <= MAX_SUPPORTED_DEPTH:
        raise ValueError(f"depth must be in [0, {MAX_SUPPORTED_DEPTH}], got {depth}")
    idx = cell_indices(points, cube, depth).astype(np.uint64)
    return (
        (_spread_bits(idx[:, 0]) << np.uint64(2))
        | (_spread_bits(idx[:, 1]) << np.uint64(1))
        | _spread_bits(idx[:, 2])
    )


def decode_cell(codes: np.ndarray, depth: int) -> np.ndarray:
    """(n, 3) integer cell coordinates at `depth` from depth-`depth` codes."""
    c = np.atleast_1d(np.asarray(codes, dtype=np.uint64))
    out = np.empty((len(c), 3), dtype=np.int64)
    out[:, 0] = _compact_bits(c >> np.uint64(2)).astype(np.int64)
    out[:, 1] = _compact_bits(c >> np.uint64(1)).astype(np.int64)
    out[:, 2] = _compact_bits(c).astype(np.int64)
    return out


def cell_bounds(cube: BoundingCube, codes: np.ndarray, depth: int) -> tuple:
    """(min_corners (n, 3), edge) of the cells with the given codes."""
    edge = cube.edge / float(1 << depth)
    cells = decode_cell(codes, depth)
    return cube.min_corner + cells * edge, edge


class OctreeNode:
    """A node of the octree: a cube plus the span of points it contains.

    Children are materialized on first access; a node has either 0 children
    (leaf) or all 8 (each child covers exactly one octant of the parent).
    """

    __slots__ = ("_tree", "depth", "code", "start", "end", "_children")

    def __init__(self, tree: "Octree", depth: int, code: int, start: int, end: int) -> None:
        self._tree = tree
        self.depth = depth
        self.code = code
        self.start = start
        self.end = end
        self._children: Optional[List["OctreeNode"]] = None

    @property
    def count(self) -> int:
        return self.end - self.start

    @property
    def is_leaf(self) -> bool:
        tree = self._tree
        return self.depth >= tree.max_depth or self.count < tree.min_points_to_split

    @property
    def bounds(self) -> BoundingCube:
        corners, edge = cell_bounds(
            self._tree.cube, np.asarray([self.code], dtype=np.uint64), self.depth
        )
        return BoundingCube(corners[0], edge)

    @property
    def point_indices(self) -> np.ndarray:
        """Original cloud indices of the points inside this node."""
        return self._tree.order[self.start : self.end]

    @property
    def children(self) -> List["OctreeNode"]:
        if self.is_leaf:
            return []
        if self._children is None:
            tree = self._tree
            shift = np.uint64(3 * (tree.max_depth - self.depth - 1))
            span = tree.sorted_codes[self.start : self.end] >> shift
            base = int(self.code) << 3
            splits = np.searchsorted(span, np.arange(base, base + 9, dtype=np.uint64))
            self._children = [
                OctreeNode(
                    tree,
                    self.depth + 1,
                    base + j,
                    self.start + int(splits[j]),
                    self.start + int(splits[j + 1]),
                )
                for j in range(8)
            ]
        return self._children


class Octree:
    """Octree over a cloud's bounding cube.

    Attributes:
        cube: root bounding cube.
        max_depth: finest subdivision level.
        min_points_to_split: a node subdivides only when it holds at least
            this many points (default 1: occupied nodes reach max_depth,
            empty space is never subdivided).
        order: permutation of point indices sorted by Morton code.
        sorted_codes: depth-max_depth Morton code per entry of `order`.
    """

    def __init__(self, cloud: PointCloud, cube: BoundingCube, max_depth: int, min_points_to_split: int) -> None:
        self.cube = cube
        self.max_depth = max_depth
        self.min_points_to_split = min_points_to_split
        codes = morton_codes(cloud.xyz, cube, max_depth)
        self.order = np.argsort(codes, kind="stable")
        self.sorted_codes = codes[self.order]
        self.root = OctreeNode(self, 0, 0, 0, len(codes))

    @property
    def finest_edge(self) -> float:
        return self.cube.edge / float(1 << self.max_depth)


def build_octree(cloud: PointCloud, max_depth: int = 11, min_points_to_split: int = 1) -> Octree:
    """Build the octree of `cloud` over its tight bounding cube."""
    if len(cloud) == 0:
        raise ValueError("cannot build an octree over an empty cloud")
    if not 1 <= max_depth <= MAX_SUPPORTED_DEPTH:
        raise ValueError(f"max_depth must be in [1, {MAX_SUPPORTED_DEPTH}], got {max_depth}")
    if min_points_to_split < 1:
        raise ValueError(f"min_points_to_split must be >= 1, got {min_points_to_split}")
    return Octree(cloud, bounding_cube(cloud), max_depth, min_points_to_split)


def nodes_at_depth(tree: Octree, depth: int) -> List[OctreeNode]:
    """All nodes at `depth`, plus leaves that bottom out above it.

    A returned node with node.depth < depth is a leaf with no descent below
    it (terminal); its own bounds are the evaluation volume at this depth.
    Ordering follows the Morton curve.
    """
    if not 0 <= depth <= tree.max_depth:
        raise ValueError(f"depth must be in [0, {tree.max_depth}], got {depth}")
    out: List[OctreeNode] = []
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if node.depth == depth or node.is_leaf:
            out.append(node)
        else:
            stack.extend(reversed(node.children))
    return out

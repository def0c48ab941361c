"""Metric volume of detected changes via a 2.5D ground grid.

Points inside the changed voxels are projected onto the ground plane and
binned into square cells; each occupied cell contributes cell area times
the top-surface height difference between the two epochs. A timeline
report aggregates per-interval volumes into cumulative totals and daily
rates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .detection import ChangeSet

__all__ = [
    "GroundGrid",
    "VolumeReport",
    "build_ground_grid",
    "change_volume",
    "timeline_report",
]

_STRIDE = np.int64(1) << np.int64(32)


@dataclass(frozen=True)
class GroundGrid:
    """Sparse 2.5D grid of per-cell height differences.

    Attributes:
        cell_size: grid cell edge, metres.
        origin: (x, y) of the grid corner; cells index from here.
        cells: (n, 2) integer cell coordinates of occupied cells.
        heights: (n,) height difference per occupied cell, metres, >= 0.
        fallback: (n,) True where only one epoch had points in the cell and
            the height fell back to that epoch's own vertical extent.
    """

    cell_size: float
    origin: np.ndarray
    cells: np.ndarray
    heights: np.ndarray
    fallback: np.ndarray

    def __post_init__(self) -> None:
        if self.cell_size <= 0:
            raise ValueError(f"cell size must be > 0, got {self.cell_size}")
        if not (len(self.cells) == len(self.heights) == len(self.fallback)):
            raise ValueError("grid arrays must align")
        if len(self.heights) and (np.asarray(self.heights) < 0).any():
            raise ValueError("cell heights must be >= 0")

    @property
    def n_cells(self) -> int:
        return len(self.heights)

    def to_dict(self) -> dict:
        return {
            "cell_size_m": self.cell_size,
            "origin": [float(v) for v in self.origin],
            "n_cells": self.n_cells,
            "n_fallback_cells": int(np.sum(self.fallback)),
            "cells": [[int(i), int(j)] for i, j in self.cells],
            "heights_m": [float(h) for h in self.heights],
            "fallback": [bool(f) for f in self.fallback],
        }


def _top_bottom_per_cell(xy: np.ndarray, z: np.ndarray, origin: np.ndarray, s: float):
    """Map points to cells and reduce to per-cell max and min z."""
    idx = np.floor((xy - origin) / s).astype(np.int64)
    keys = idx[:, 0] * _STRIDE + idx[:, 1]
    unique, inverse = np.unique(keys, return_inverse=True)
    top = np.full(len(unique), -np.inf)
    bottom = np.full(len(unique), np.inf)
    np.maximum.at(top, inverse, z)
    np.minimum.at(bottom, inverse, z)
    return {int(k): (float(t), float(b)) for k, t, b in zip(unique, top, bottom)}


def build_ground_grid(
    changes: ChangeSet,
    earlier,
    later,
    cell_size: Optional[float] = None,
) -> GroundGrid:
    """Project the changed region onto the ground plane.

    Both clouds are restricted to points inside the changed voxels. Cells
    occupied in both epochs get h = |z_top(earlier) - z_top(later)|; cells
    occupied in only one epoch fall back to that epoch's own vertical
    extent in the cell and are flagged. The default cell size is the
    changed-voxel edge. An empty ChangeSet yields an empty grid.
    """
    s = changes.voxel_edge if cell_size is None else float(cell_size)
    if s <= 0:
        raise ValueError(f"cell size must be > 0, got {s}")
    pts_e = earlier.xyz if hasattr(earlier, "xyz") else np.asarray(earlier, dtype=np.float64)
    pts_l = later.xyz if hasattr(later, "xyz") else np.asarray(later, dtype=np.float64)
    in_e = pts_e[changes.contains(pts_e)] if len(pts_e) else pts_e.reshape(0, 3)
    in_l = pts_l[changes.contains(pts_l)] if len(pts_l) else pts_l.reshape(0, 3)
    empty = (np.zeros((0, 2), dtype=np.int64), np.zeros(0), np.zeros(0, dtype=bool))
    if len(in_e) == 0 and len(in_l) == 0:
        return GroundGrid(s, np.zeros(2), *empty)

    # Anchor the grid on the voxel lattice (the grid is the voxels'
    # ground-plane projection), shifted to the occupied corner so cell
    # indices stay small. The lattice corner follows the data, which keeps
    # volumes translation invariant.
    stacked_xy = np.vstack([in_e[:, :2], in_l[:, :2]])
    corner = np.asarray(changes.cube.min_corner[:2], dtype=np.float64)
    origin = corner + np.floor((stacked_xy.min(axis=0) - corner) / s) * s
    cells_e = _top_bottom_per_cell(in_e[:, :2], in_e[:, 2], origin, s) if len(in_e) else {}
    cells_l = _top_bottom_per_cell(in_l[:, :2], in_l[:, 2], origin, s) if len(in_l) else {}

    keys = sorted(set(cells_e) | set(cells_l))
    heights = np.zeros(len(keys))
    fallback = np.zeros(len(keys), dtype=bool)
    for i, key in enumerate(keys):
        if key in cells_e and key in cells_l:
            heights[i] = abs(cells_e[key][0] - cells_l[key][0])
        elif key in cells_e:
            heights[i] = cells_e[key][0] - cells_e[key][1]
            fallback[i] = True
        else:
            heights[i] = cells_l[key][0] - cells_l[key][1]
            fallback[i] = True
    cells = np.array([[k // int(_STRIDE), k % int(_STRIDE)] for k in keys], dtype=np.int64)
    if not len(cells):
        cells = np.zeros((0, 2), dtype=np.int64)
    return GroundGrid(s, origin, cells, heights, fallback)


def change_volume(grid: GroundGrid) -> float:
    """Total volume of the grid: sum over cells of cell area times height."""
    return float(np.sum(grid.cell_size**2 * np.asarray(grid.heights)))


def _day_span(a, b) -> float:
    delta = b - a
    if hasattr(delta, "total_seconds"):
        return delta.total_seconds() / 86400.0
    return float(delta)


@dataclass(frozen=True)
class VolumeReport:
    """Per-interval volumes with running totals and daily rates.

    Attributes:
        timestamps: epoch times as given (numbers in days, or date/datetime).
        interval_volumes: cubic metres per consecutive epoch pair.
        cumulative_volumes: running sum of interval volumes.
        daily_rates: interval volume over interval length in days.
    """

    timestamps: Tuple
    interval_volumes: Tuple[float, ...]
    cumulative_volumes: Tuple[float, ...]
    daily_rates: Tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "timestamps": [str(t) for t in self.timestamps],
            "interval_volumes_m3": list(self.interval_volumes),
            "cumulative_volumes_m3": list(self.cumulative_volumes),
            "daily_rates_m3_per_day": list(self.daily_rates),
            "total_volume_m3": self.cumulative_volumes[-1] if self.cumulative_volumes else 0.0,
        }


def timeline_report(timestamps: Sequence, grids: Sequence) -> VolumeReport:
    """Aggregate per-interval grids into a volume timeline.

    `timestamps` must be strictly increasing with one entry per epoch;
    `grids` holds one GroundGrid (or a precomputed volume) per consecutive
    epoch pair.
    """
    timestamps = tuple(timestamps)
    if len(timestamps) < 2:
        raise ValueError("timeline needs at least two epochs")
    if len(grids) != len(timestamps) - 1:
        raise ValueError(
            f"expected {len(timestamps) - 1} grids for {len(timestamps)} epochs, got {len(grids)}"
        )
    spans = [_day_span(a, b) for a, b in zip(timestamps, timestamps[1:])]
    if min(spans) <= 0:
        raise ValueError("timestamps must be strictly increasing")
    volumes = [change_volume(g) if isinstance(g, GroundGrid) else float(g) for g in grids]
    cumulative = np.cumsum(volumes)
    rates = [v / d for v, d in zip(volumes, spans)]
    return VolumeReport(
        timestamps=timestamps,
        interval_volumes=tuple(volumes),
        cumulative_volumes=tuple(float(c) for c in cumulative),
        daily_rates=tuple(rates),
    )

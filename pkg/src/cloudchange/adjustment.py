"""Progressive constrained bundle adjustment.

Given camera poses and self-calibration for one or more earlier (reference)
epochs, initial values for the newest epoch, and tie-point observations
spanning all of them, the solver estimates the newest epoch's exterior
orientations, its self-calibration, and the shared object points. Reference
parameters stay exactly at their inputs: by default they are excluded from
the parameter vector, which is the exact limit of giving them infinite prior
weight; a `prior_weight` mode that instead keeps them as parameters under a
huge prior exists to verify that equivalence.

The minimization is Levenberg-Marquardt on the weighted reprojection error,
with the object points eliminated through the standard reduced (Schur
complement) system so that the dense solve only spans camera and calibration
parameters. After convergence, observations whose reprojection error exceeds
a robust threshold (scaled median absolute deviation) are removed and the
solve repeats a bounded number of times.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.spatial.transform import Rotation

from .cameras import (
    EpochCameras,
    ExteriorOrientation,
    ImageObservation,
    ObjectPoint,
    SelfCalibration,
    _jacobians_raw,
)

__all__ = [
    "AdjustmentOptions",
    "AdjustmentResult",
    "LinearizedSystem",
    "Scenario",
    "load_scenario",
    "refine_progressive",
    "save_scenario",
]

logger = logging.getLogger(__name__)

_CAM_PARAMS = 6  # local rotation increment (3) + center (3)
_CAL_PARAMS = 5  # focal length, cx, cy, k1, k2
_POINT_PARAMS = 3


@dataclass
class AdjustmentOptions:
    """Solver settings for refine_progressive.

    Attributes:
        max_iterations: Levenberg-Marquardt iteration budget per solve.
        convergence_tolerance: relative cost decrease on an accepted step
            below which the solve stops.
        step_tolerance: parameter-step norm, relative to the parameter
            vector norm, below which the solve stops (covers the machine
            precision plateau where no step can improve the cost).
        initial_lambda: starting LM damping factor.
        max_outlier_rounds: how many times the solve may repeat after
            removing outlier observations.
        outlier_sigma_scale: rejection threshold in multiples of the robust
            sigma (1.4826 x median absolute residual component).
        outlier_floor: absolute lower bound on the rejection threshold,
            pixels; keeps pure numerical noise from being flagged.
        fixed_handling: "exclude" removes reference parameters from the
            system; "prior_weight" keeps them with a huge prior.
        prior_weight: weight applied to reference-parameter priors in
            "prior_weight" mode.
        min_track_length: tracks observed fewer times than this are dropped
            from the solve with a warning.
    """

    max_iterations: int = 50
    convergence_tolerance: float = 1e-12
    step_tolerance: float = 1e-12
    initial_lambda: float = 1e-3
    max_outlier_rounds: int = 3
    outlier_sigma_scale: float = 3.0
    outlier_floor: float = 1e-6
    fixed_handling: str = "exclude"
    prior_weight: float = 1e12
    min_track_length: int = 2

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not 0 < self.convergence_tolerance < 1:
            raise ValueError("convergence_tolerance must be in (0, 1)")
        if not 0 < self.step_tolerance < 1:
            raise ValueError("step_tolerance must be in (0, 1)")
        if self.max_outlier_rounds < 0:
            raise ValueError("max_outlier_rounds must be >= 0")
        if self.outlier_sigma_scale <= 0:
            raise ValueError("outlier_sigma_scale must be > 0")
        if self.fixed_handling not in ("exclude", "prior_weight"):
            raise ValueError(
                f"fixed_handling must be 'exclude' or 'prior_weight', got {self.fixed_handling!r}"
            )
        if self.prior_weight <= 0:
            raise ValueError("prior_weight must be > 0")
        if self.min_track_length < 2:
            raise ValueError(f"min_track_length must be >= 2, got {self.min_track_length}")


@dataclass
class LinearizedSystem:
    """Jacobian blocks of one linearization, split by parameter group.

    Rows come in pairs, two per retained observation (x, then y). The fixed
    block is None when reference parameters are excluded from the system.

    Attributes:
        jac_points: sparse (2m, 3p) block for object points.
        jac_new: sparse (2m, 6 n_new + 5) block for new-epoch cameras and
            self-calibration.
        jac_fixed: sparse block for reference-epoch parameters, or None.
        residuals: (2m,) measured minus projected, pixels.
        weights: (2m,) per-row weights (each observation's weight twice).
    """

    jac_points: sparse.spmatrix
    jac_new: sparse.spmatrix
    jac_fixed: Optional[sparse.spmatrix]
    residuals: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        rows = self.jac_points.shape[0]
        if rows % 2:
            raise ValueError("system must have two rows per observation")
        for block in (self.jac_new, self.jac_fixed):
            if block is not None and block.shape[0] != rows:
                raise ValueError("Jacobian blocks disagree on row count")
        if self.residuals.shape != (rows,) or self.weights.shape != (rows,):
            raise ValueError("residual/weight length must equal the row count")


@dataclass
class AdjustmentResult:
    """Outcome of a progressive adjustment.

    Attributes:
        new_cameras: optimized new-epoch cameras and self-calibration.
        points: optimized object points by track id (tracks dropped from the
            solve keep their last, possibly initial, value).
        fixed_cameras: the reference-epoch inputs, echoed unchanged.
        residuals: (2m,) residuals of all input observations at the final
            parameters, input order, NaN where a point fell behind a camera.
        rms: final RMS over retained observations, pixels.
        rejected_observations: indices into the input observation sequence
            that were removed (outliers, or members of dropped tracks).
        iteration_log: one record per LM iteration with cost, RMS, damping.
        converged: False when an iteration budget ran out instead of the
            cost change reaching the tolerance.
    """

    new_cameras: EpochCameras
    points: Dict[int, ObjectPoint]
    fixed_cameras: List[EpochCameras]
    residuals: np.ndarray
    rms: float
    rejected_observations: List[int]
    iteration_log: List[dict] = field(default_factory=list)
    converged: bool = True


class _Problem:
    """Flattened arrays and column layout for one adjustment instance."""

    def __init__(
        self,
        fixed_epochs: Sequence[EpochCameras],
        new_epoch: EpochCameras,
        points: Mapping[int, ObjectPoint],
        observations: Sequence[ImageObservation],
        include_fixed: bool,
    ) -> None:
        # Camera/calibration tables. Slot 0 is the new epoch's calibration;
        # fixed epochs follow in the given order.
        self.new_ids = sorted(new_epoch.cameras)
        self.cam_ids: List = list(self.new_ids)
        cam_rot = [new_epoch.cameras[c].rotation for c in self.new_ids]
        cam_cen = [new_epoch.cameras[c].center for c in self.new_ids]
        cam_cal = [0] * len(self.new_ids)
        cal_values = [new_epoch.calibration.as_array()]
        for slot, epoch in enumerate(fixed_epochs, start=1):
            for cam_id in sorted(epoch.cameras):
                if cam_id in set(self.cam_ids):
                    raise ValueError(f"camera id {cam_id} appears in more than one epoch")
                self.cam_ids.append(cam_id)
                cam_rot.append(epoch.cameras[cam_id].rotation)
                cam_cen.append(epoch.cameras[cam_id].center)
                cam_cal.append(slot)
            cal_values.append(epoch.calibration.as_array())
        self.cam_rot = np.array(cam_rot, dtype=np.float64).reshape(-1, 3)
        self.cam_cen = np.array(cam_cen, dtype=np.float64).reshape(-1, 3)
        self.cam_cal = np.array(cam_cal, dtype=np.intp)
        self.cal_values = np.array(cal_values, dtype=np.float64)
        self.n_new_cams = len(self.new_ids)

        # Column layout: new cameras, new calibration, then (prior mode
        # only) each fixed epoch's cameras and calibration.
        n_cams = len(self.cam_ids)
        n_cals = len(cal_values)
        self.cam_col = np.full(n_cams, -1, dtype=np.intp)
        self.cal_col = np.full(n_cals, -1, dtype=np.intp)
        for i in range(self.n_new_cams):
            self.cam_col[i] = _CAM_PARAMS * i
        self.new_width = _CAM_PARAMS * self.n_new_cams + _CAL_PARAMS
        self.cal_col[0] = _CAM_PARAMS * self.n_new_cams
        offset = self.new_width
        if include_fixed:
            for i in range(self.n_new_cams, n_cams):
                self.cam_col[i] = offset
                offset += _CAM_PARAMS
            for slot in range(1, n_cals):
                self.cal_col[slot] = offset
                offset += _CAL_PARAMS
        self.fixed_width = offset - self.new_width
        self.n_cam_cal_cols = offset
        self.include_fixed = include_fixed
        self.input_rot = self.cam_rot.copy()
        self.input_cen = self.cam_cen.copy()
        self.input_cal = self.cal_values.copy()

        # Track table and observation arrays.
        self.track_ids = sorted(points)
        track_index = {t: j for j, t in enumerate(self.track_ids)}
        self.positions = np.array(
            [points[t].position for t in self.track_ids], dtype=np.float64
        ).reshape(-1, 3)
        cam_index = {c: i for i, c in enumerate(self.cam_ids)}
        self.obs_cam = np.array([cam_index[o.camera_id] for o in observations], dtype=np.intp)
        self.obs_track = np.array([track_index[o.track_id] for o in observations], dtype=np.intp)
        self.measured = np.array([(o.x, o.y) for o in observations], dtype=np.float64).reshape(
            -1, 2
        )
        self.obs_weight = np.array([o.weight for o in observations], dtype=np.float64)

    def snapshot(self) -> tuple:
        return self.cam_rot.copy(), self.cam_cen.copy(), self.cal_values.copy(), self.positions.copy()

    def restore(self, state: tuple) -> None:
        self.cam_rot, self.cam_cen, self.cal_values, self.positions = (a.copy() for a in state)

    def calibration_of(self, slot: int) -> SelfCalibration:
        return SelfCalibration.from_array(self.cal_values[slot])

    def param_norm(self, track_active: np.ndarray) -> float:
        """Norm of the current variable-parameter vector."""
        var_cams = self.cam_col >= 0
        var_cals = self.cal_col >= 0
        parts = [
            self.cam_rot[var_cams].ravel(),
            self.cam_cen[var_cams].ravel(),
            self.cal_values[var_cals].ravel(),
            self.positions[track_active].ravel(),
        ]
        return float(np.linalg.norm(np.concatenate(parts)))

    def residuals(self, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Residuals (m, 2) for masked observations; second array flags rows
        whose point sits at or behind the camera plane (residual NaN)."""
        m = len(self.obs_cam)
        res = np.full((m, 2), np.nan)
        behind = np.zeros(m, dtype=bool)
        rows_all = np.flatnonzero(mask)
        for cam_row in np.unique(self.obs_cam[rows_all]):
            rows = rows_all[self.obs_cam[rows_all] == cam_row]
            pts = self.positions[self.obs_track[rows]]
            rot = Rotation.from_rotvec(self.cam_rot[cam_row]).as_matrix()
            cam = (pts - self.cam_cen[cam_row]) @ rot.T
            bad = cam[:, 2] <= 0
            behind[rows[bad]] = True
            ok = rows[~bad]
            if not len(ok):
                continue
            f, cx, cy, k1, k2 = self.cal_values[self.cam_cal[cam_row]]
            u = cam[~bad, 0] / cam[~bad, 2]
            v = cam[~bad, 1] / cam[~bad, 2]
            r2 = u * u + v * v
            factor = 1.0 + k1 * r2 + k2 * r2 * r2
            res[ok, 0] = self.measured[ok, 0] - (f * u * factor + cx)
            res[ok, 1] = self.measured[ok, 1] - (f * v * factor + cy)
        return res, behind

    def cost(self, mask: np.ndarray) -> float:
        """Weighted squared reprojection error; inf when a masked point is
        at or behind its camera."""
        res, behind = self.residuals(mask)
        if behind[mask].any():
            return float("inf")
        rows = mask & ~behind
        return float((self.obs_weight[rows, None] * res[rows] ** 2).sum())

    def linearize(self, mask: np.ndarray, track_active: np.ndarray) -> LinearizedSystem:
        rows_all = np.flatnonzero(mask)
        m = len(rows_all)
        row_of = np.full(len(self.obs_cam), -1, dtype=np.intp)
        row_of[rows_all] = np.arange(m)
        residuals = np.empty(2 * m)
        weights = np.repeat(self.obs_weight[rows_all], 2)

        # Active tracks get contiguous 3-column slots in input order.
        active_slot = np.full(len(self.track_ids), -1, dtype=np.intp)
        active_slot[track_active] = np.arange(int(track_active.sum()))
        self.point_slot = active_slot

        pt_rows, pt_cols, pt_vals = [], [], []
        new_rows, new_cols, new_vals = [], [], []
        fix_rows, fix_cols, fix_vals = [], [], []

        for cam_row in np.unique(self.obs_cam[rows_all]):
            rows = rows_all[self.obs_cam[rows_all] == cam_row]
            tracks = self.obs_track[rows]
            pts = self.positions[tracks]
            rot = Rotation.from_rotvec(self.cam_rot[cam_row]).as_matrix()
            pixels, d_point, d_pose, d_cal = _jacobians_raw(
                pts, rot, self.cam_cen[cam_row], self.cal_values[self.cam_cal[cam_row]]
            )
            out = row_of[rows]
            res = self.measured[rows] - pixels
            residuals[2 * out] = res[:, 0]
            residuals[2 * out + 1] = res[:, 1]

            k = len(rows)
            pair = np.empty(2 * k, dtype=np.intp)
            pair[0::2] = 2 * out
            pair[1::2] = 2 * out + 1

            slots = active_slot[tracks]
            pt_rows.append(np.repeat(pair, _POINT_PARAMS))
            cols = (_POINT_PARAMS * slots)[:, None] + np.arange(_POINT_PARAMS)
            pt_cols.append(np.repeat(cols, 2, axis=0).ravel())
            pt_vals.append(d_point.reshape(2 * k, _POINT_PARAMS).ravel())

            cam_base = self.cam_col[cam_row]
            if cam_base >= 0:
                dest = (new_rows, new_cols, new_vals) if cam_row < self.n_new_cams else (
                    fix_rows,
                    fix_cols,
                    fix_vals,
                )
                base = cam_base if cam_row < self.n_new_cams else cam_base - self.new_width
                dest[0].append(np.repeat(pair, _CAM_PARAMS))
                dest[1].append(
                    np.tile(base + np.arange(_CAM_PARAMS), 2 * k)
                )
                dest[2].append(d_pose.reshape(2 * k, _CAM_PARAMS).ravel())
            cal_slot = self.cam_cal[cam_row]
            cal_base = self.cal_col[cal_slot]
            if cal_base >= 0:
                dest = (new_rows, new_cols, new_vals) if cal_slot == 0 else (
                    fix_rows,
                    fix_cols,
                    fix_vals,
                )
                base = cal_base if cal_slot == 0 else cal_base - self.new_width
                dest[0].append(np.repeat(pair, _CAL_PARAMS))
                dest[1].append(np.tile(base + np.arange(_CAL_PARAMS), 2 * k))
                dest[2].append(d_cal.reshape(2 * k, _CAL_PARAMS).ravel())

        def build(rows, cols, vals, width):
            if rows:
                data = (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols)))
                return sparse.coo_matrix(data, shape=(2 * m, width)).tocsr()
            return sparse.csr_matrix((2 * m, width))

        n_active = int(track_active.sum())
        jac_points = build(pt_rows, pt_cols, pt_vals, _POINT_PARAMS * n_active)
        jac_new = build(new_rows, new_cols, new_vals, self.new_width)
        jac_fixed = (
            build(fix_rows, fix_cols, fix_vals, self.fixed_width) if self.include_fixed else None
        )
        return LinearizedSystem(
            jac_points=jac_points,
            jac_new=jac_new,
            jac_fixed=jac_fixed,
            residuals=residuals,
            weights=weights,
        )

    def prior_rows(self, weight: float) -> Tuple[sparse.spmatrix, np.ndarray, np.ndarray]:
        """Prior equations keeping fixed parameters at their inputs
        (prior_weight mode): identity Jacobians, residual = input - current
        (rotations via the local deviation rotation vector)."""
        rows, cols, vals, res = [], [], [], []

        def add(col_base, residual):
            k = len(residual)
            start = len(res)
            rows.extend(range(start, start + k))
            cols.extend(range(col_base, col_base + k))
            vals.extend([1.0] * k)
            res.extend(residual)

        for cam_row in range(self.n_new_cams, len(self.cam_ids)):
            col = self.cam_col[cam_row]
            r_in = Rotation.from_rotvec(self.input_rot[cam_row])
            r_cur = Rotation.from_rotvec(self.cam_rot[cam_row])
            deviation = (r_in.inv() * r_cur).as_rotvec()
            add(col, list(-deviation))
            add(col + 3, list(self.input_cen[cam_row] - self.cam_cen[cam_row]))
        for slot in range(1, len(self.cal_values)):
            add(self.cal_col[slot], list(self.input_cal[slot] - self.cal_values[slot]))

        q = len(res)
        jac = sparse.coo_matrix(
            (vals, (rows, cols)), shape=(q, self.n_cam_cal_cols)
        ).tocsr()
        return jac, np.array(res), np.full(q, weight)

    def apply_step(self, delta: np.ndarray, track_active: np.ndarray) -> None:
        for cam_row in range(len(self.cam_ids)):
            col = self.cam_col[cam_row]
            if col < 0:
                continue
            d_rot, d_cen = delta[col : col + 3], delta[col + 3 : col + 6]
            composed = Rotation.from_rotvec(self.cam_rot[cam_row]) * Rotation.from_rotvec(d_rot)
            self.cam_rot[cam_row] = composed.as_rotvec()
            self.cam_cen[cam_row] += d_cen
        for slot in range(len(self.cal_values)):
            col = self.cal_col[slot]
            if col >= 0:
                self.cal_values[slot] += delta[col : col + _CAL_PARAMS]
        point_part = delta[self.n_cam_cal_cols :].reshape(-1, _POINT_PARAMS)
        self.positions[track_active] += point_part


def _solve_reduced(
    system: LinearizedSystem,
    prior: Optional[Tuple[sparse.spmatrix, np.ndarray, np.ndarray]],
    lam: float,
    n_cam_cal_cols: int,
) -> np.ndarray:
    """One damped normal-equation solve, eliminating points by Schur
    complement. Returns the full parameter step."""
    blocks = [system.jac_new]
    if system.jac_fixed is not None:
        blocks.append(system.jac_fixed)
    blocks.append(system.jac_points)
    jac = sparse.hstack(blocks, format="csr")
    residuals = system.residuals
    weights = system.weights
    if prior is not None:
        prior_jac, prior_res, prior_w = prior
        pad = sparse.csr_matrix((prior_jac.shape[0], jac.shape[1] - prior_jac.shape[1]))
        jac = sparse.vstack([jac, sparse.hstack([prior_jac, pad], format="csr")], format="csr")
        residuals = np.concatenate([residuals, prior_res])
        weights = np.concatenate([weights, prior_w])

    weighted = jac.multiply(weights[:, None]).tocsr()
    hess = (jac.T @ weighted).tocsc()
    grad = jac.T @ (weights * residuals)
    diag = hess.diagonal()
    if (diag <= 0).any():
        raise ValueError("rank-deficient normal equations: parameter without support")
    hess = hess + sparse.diags(lam * diag)

    nc = n_cam_cal_cols
    h_cc = hess[:nc, :nc].toarray()
    h_cp = hess[:nc, nc:].tocsr()
    h_pp = hess[nc:, nc:].tocoo()
    n_points = (jac.shape[1] - nc) // _POINT_PARAMS
    block_row = h_pp.row // _POINT_PARAMS
    if (h_pp.col // _POINT_PARAMS != block_row).any():
        raise ValueError("point block of the normal matrix is not block-diagonal")
    blocks_pp = np.zeros((n_points, _POINT_PARAMS, _POINT_PARAMS))
    np.add.at(
        blocks_pp,
        (block_row, h_pp.row % _POINT_PARAMS, h_pp.col % _POINT_PARAMS),
        h_pp.data,
    )
    try:
        inv_blocks = np.linalg.inv(blocks_pp)
    except np.linalg.LinAlgError as exc:
        raise ValueError("rank-deficient normal equations in the point block") from exc
    indptr = np.arange(n_points + 1)
    pp_inv = sparse.bsr_matrix(
        (inv_blocks, np.arange(n_points), indptr),
        shape=(jac.shape[1] - nc, jac.shape[1] - nc),
    )

    reduced = h_cc - (h_cp @ pp_inv @ h_cp.T).toarray()
    rhs = grad[:nc] - h_cp @ (pp_inv @ grad[nc:])
    try:
        delta_c = np.linalg.solve(reduced, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("rank-deficient normal equations in the reduced system") from exc
    if not np.isfinite(delta_c).all():
        raise ValueError("rank-deficient normal equations in the reduced system")
    delta_p = pp_inv @ (grad[nc:] - h_cp.T @ delta_c)
    return np.concatenate([delta_c, delta_p])


def _levenberg_marquardt(
    problem: _Problem,
    mask: np.ndarray,
    track_active: np.ndarray,
    options: AdjustmentOptions,
    log: List[dict],
    round_index: int,
) -> bool:
    """Minimize the weighted cost over masked observations in place.
    Returns True when the relative cost change reached the tolerance."""
    prior_weight = options.prior_weight if problem.include_fixed else None

    def total_cost() -> float:
        value = problem.cost(mask)
        if prior_weight is not None and np.isfinite(value):
            _, prior_res, prior_w = problem.prior_rows(prior_weight)
            value += float((prior_w * prior_res**2).sum())
        return value

    cost = total_cost()
    if not np.isfinite(cost):
        raise ValueError("initial parameters place observations at or behind a camera")
    lam = options.initial_lambda
    n_kept = int(mask.sum())

    for iteration in range(options.max_iterations):
        system = problem.linearize(mask, track_active)
        prior = problem.prior_rows(prior_weight) if prior_weight is not None else None
        delta = _solve_reduced(system, prior, lam, problem.n_cam_cal_cols)
        step_norm = float(np.linalg.norm(delta))
        tiny_step = step_norm <= options.step_tolerance * (
            1.0 + problem.param_norm(track_active)
        )
        before = problem.snapshot()
        problem.apply_step(delta, track_active)
        trial = total_cost()
        accepted = bool(np.isfinite(trial) and trial < cost)
        rms = float(np.sqrt(max(trial if accepted else cost, 0.0) / (2 * n_kept)))
        log.append(
            {
                "round": round_index,
                "iteration": iteration,
                "cost": trial if accepted else cost,
                "rms": rms,
                "lambda": lam,
                "accepted": accepted,
                "step_norm": step_norm,
            }
        )
        if accepted:
            improvement = cost - trial
            converged = improvement <= options.convergence_tolerance * max(cost, 1e-300)
            cost = trial
            lam = max(lam / 10.0, 1e-12)
            if converged or tiny_step:
                return True
        else:
            problem.restore(before)
            if tiny_step:
                return True
            if lam >= 1e12:
                return False
            lam = min(lam * 10.0, 1e12)
    return False


def _normalize_fixed(fixed) -> List[EpochCameras]:
    if isinstance(fixed, EpochCameras):
        return [fixed]
    return list(fixed)


def _normalize_points(points) -> Dict[int, ObjectPoint]:
    if isinstance(points, Mapping):
        items = points.items()
        out = {}
        for track, value in items:
            out[track] = value if isinstance(value, ObjectPoint) else ObjectPoint(
                position=np.asarray(value, dtype=np.float64), track_id=track
            )
        return out
    return {p.track_id: p for p in points}


def refine_progressive(
    fixed: Union[EpochCameras, Sequence[EpochCameras]],
    new: EpochCameras,
    points: Union[Mapping[int, ObjectPoint], Sequence[ObjectPoint]],
    observations: Sequence[ImageObservation],
    options: Optional[AdjustmentOptions] = None,
) -> AdjustmentResult:
    """Estimate new-epoch poses, self-calibration, and object points.

    Reference-epoch parameters never move; see the module docstring for the
    two ways that is enforced. Observations may reference cameras of any
    epoch. Tracks observed fewer than `options.min_track_length` times are
    dropped with a warning and their observations reported as rejected.

    Raises ValueError for dangling camera/track references, duplicate camera
    ids across epochs, a new camera with no observations, initial values
    that place observations behind a camera, or rank-deficient normal
    equations. Non-convergence within the iteration budget is reported via
    `converged=False` on the result instead.
    """
    options = options or AdjustmentOptions()
    fixed_epochs = _normalize_fixed(fixed)
    point_map = _normalize_points(points)
    observations = list(observations)

    known_cams = set(new.cameras)
    for epoch in fixed_epochs:
        known_cams |= set(epoch.cameras)
    for obs in observations:
        if obs.camera_id not in known_cams:
            raise ValueError(f"observation references unknown camera {obs.camera_id}")
        if obs.track_id not in point_map:
            raise ValueError(f"observation references unknown track {obs.track_id}")

    problem = _Problem(
        fixed_epochs,
        new,
        point_map,
        observations,
        include_fixed=options.fixed_handling == "prior_weight",
    )
    m = len(observations)
    mask = np.ones(m, dtype=bool)
    track_active = np.ones(len(problem.track_ids), dtype=bool)
    rejected: List[int] = []

    def enforce_track_support() -> None:
        """Drop tracks below the minimum observation count (cascading)."""
        while True:
            counts = np.bincount(
                problem.obs_track[mask], minlength=len(problem.track_ids)
            )
            starved = track_active & (counts < options.min_track_length)
            if not starved.any():
                break
            for j in np.flatnonzero(starved):
                track_active[j] = False
                dropped = np.flatnonzero(mask & (problem.obs_track == j))
                mask[dropped] = False
                rejected.extend(int(i) for i in dropped)
                logger.warning(
                    "track %s kept %d observation(s), fewer than %d; dropped from the solve",
                    problem.track_ids[j],
                    int(counts[j]),
                    options.min_track_length,
                )

    never_observed = set(problem.track_ids) - {o.track_id for o in observations}
    for track in sorted(never_observed):
        logger.warning("track %s has no observations; carried through unchanged", track)
    enforce_track_support()

    def check_camera_support() -> None:
        counts = np.bincount(problem.obs_cam[mask], minlength=len(problem.cam_ids))
        for i in range(problem.n_new_cams):
            if counts[i] == 0:
                raise ValueError(
                    f"new camera {problem.cam_ids[i]} has no retained observations"
                )

    check_camera_support()

    log: List[dict] = []
    converged = False
    for round_index in range(options.max_outlier_rounds + 1):
        converged = _levenberg_marquardt(
            problem, mask, track_active, options, log, round_index
        )
        res, behind = problem.residuals(mask)
        magnitudes = np.hypot(res[:, 0], res[:, 1])
        components = np.abs(res[mask & ~behind]).ravel()
        robust_sigma = 1.4826 * float(np.median(components)) if len(components) else 0.0
        threshold = max(options.outlier_sigma_scale * robust_sigma, options.outlier_floor)
        outliers = mask & (behind | (magnitudes > threshold))
        if not outliers.any() or round_index == options.max_outlier_rounds:
            break
        dropped = np.flatnonzero(outliers)
        mask[dropped] = False
        rejected.extend(int(i) for i in dropped)
        logger.info(
            "outlier round %d removed %d observation(s) above %.3g px",
            round_index + 1,
            len(dropped),
            threshold,
        )
        enforce_track_support()
        check_camera_support()

    final_res, _ = problem.residuals(np.ones(m, dtype=bool))
    kept = mask
    rms = float(np.sqrt((final_res[kept] ** 2).sum() / (2 * int(kept.sum()))))

    new_cams = {
        problem.cam_ids[i]: ExteriorOrientation(
            center=problem.cam_cen[i], rotation=problem.cam_rot[i]
        )
        for i in range(problem.n_new_cams)
    }
    result_points = {
        track: ObjectPoint(position=problem.positions[j], track_id=track)
        for j, track in enumerate(problem.track_ids)
    }
    return AdjustmentResult(
        new_cameras=EpochCameras(
            epoch=new.epoch,
            calibration=problem.calibration_of(0),
            cameras=new_cams,
        ),
        points=result_points,
        fixed_cameras=fixed_epochs,
        residuals=final_res.ravel(),
        rms=rms,
        rejected_observations=sorted(rejected),
        iteration_log=log,
        converged=converged,
    )


@dataclass
class Scenario:
    """A bundle-adjustment problem as stored on disk.

    Attributes:
        fixed_epochs: reference epochs whose parameters stay at their inputs.
        new_epoch: the epoch whose parameters are to be estimated.
        points: initial object points by track id.
        observations: tie-point measurements across all epochs.
        truth: optional ground-truth block (same layout as the estimate
            fields) carried for evaluation; never read by the solver.
    """

    fixed_epochs: List[EpochCameras]
    new_epoch: EpochCameras
    points: Dict[int, ObjectPoint]
    observations: List[ImageObservation]
    truth: Optional[dict] = None


def _epoch_to_dict(epoch: EpochCameras, fixed: bool) -> dict:
    sc = epoch.calibration
    return {
        "epoch": epoch.epoch,
        "fixed": fixed,
        "calibration": {
            "focal_length": sc.focal_length,
            "cx": sc.cx,
            "cy": sc.cy,
            "k1": sc.k1,
            "k2": sc.k2,
        },
        "cameras": [
            {
                "id": cam_id,
                "center": [float(v) for v in eo.center],
                "rotation": [float(v) for v in eo.rotation],
            }
            for cam_id, eo in sorted(epoch.cameras.items())
        ],
    }


def _epoch_from_dict(entry: dict) -> EpochCameras:
    sc = SelfCalibration(**entry["calibration"])
    cameras = {
        cam["id"]: ExteriorOrientation(
            center=np.array(cam["center"], dtype=np.float64),
            rotation=np.array(cam["rotation"], dtype=np.float64),
        )
        for cam in entry["cameras"]
    }
    return EpochCameras(epoch=entry["epoch"], calibration=sc, cameras=cameras)


def save_scenario(scenario: Scenario, path) -> None:
    """Write a scenario as deterministic JSON (sorted keys)."""
    payload = {
        "epochs": [_epoch_to_dict(e, True) for e in scenario.fixed_epochs]
        + [_epoch_to_dict(scenario.new_epoch, False)],
        "points": [
            {"track": track, "position": [float(v) for v in point.position]}
            for track, point in sorted(scenario.points.items())
        ],
        "observations": [
            {
                "camera": o.camera_id,
                "track": o.track_id,
                "x": o.x,
                "y": o.y,
                "weight": o.weight,
            }
            for o in scenario.observations
        ],
    }
    if scenario.truth is not None:
        payload["truth"] = scenario.truth
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_scenario(path) -> Scenario:
    """Read a scenario written by save_scenario.

    Exactly one epoch must carry `fixed: false`.
    """
    payload = json.loads(Path(path).read_text())
    fixed_epochs = [_epoch_from_dict(e) for e in payload["epochs"] if e["fixed"]]
    new_entries = [e for e in payload["epochs"] if not e["fixed"]]
    if len(new_entries) != 1:
        raise ValueError(
            f"scenario must contain exactly one non-fixed epoch, found {len(new_entries)}"
        )
    points = {
        p["track"]: ObjectPoint(
            position=np.array(p["position"], dtype=np.float64), track_id=p["track"]
        )
        for p in payload["points"]
    }
    observations = [
        ImageObservation(
            camera_id=o["camera"],
            track_id=o["track"],
            x=float(o["x"]),
            y=float(o["y"]),
            weight=float(o.get("weight", 1.0)),
        )
        for o in payload["observations"]
    ]
    return Scenario(
        fixed_epochs=fixed_epochs,
        new_epoch=_epoch_from_dict(new_entries[0]),
        points=points,
        observations=observations,
        truth=payload.get("truth"),
    )

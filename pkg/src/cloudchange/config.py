"""Pipeline configuration: strict YAML with every default echoed back.

Unknown keys are errors (named by their dotted path), defaults are resolved
at parse time so a serialized config is complete provenance, and
parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import yaml

from .detection import ChangeParams
from .registration import IcpParams

__all__ = [
    "EpochInput",
    "PipelineConfig",
    "config_to_dict",
    "parse_config",
    "parse_config_text",
    "serialize_config",
]

REPORT_VERSION = 1

_REGISTRATION_MODES = ("none", "icp")


@dataclass(frozen=True)
class EpochInput:
    """One epoch's cloud file and acquisition time.

    Attributes:
        path: cloud file readable by the cloud loaders.
        timestamp: either a number (days) or a calendar date.
    """

    path: str
    timestamp: Union[float, datetime.date]


@dataclass(frozen=True)
class PipelineConfig:
    """Fully resolved settings for a pipeline run.

    Attributes:
        epochs: at least two inputs with strictly increasing timestamps.
        registration: "none" or "icp" (later epoch aligned to the earlier).
        icp: registration knobs, used only in "icp" mode.
        detection: change-detection knobs.
        grid_size: ground-grid cell edge, metres; None uses the changed
            voxel edge.
        output_dir: where the run writes its artifacts.
        report_version: format version stamped into reports.
        seed: base seed recorded in the manifest.
        threads: worker count for neighbour queries; None keeps the default.
    """

    epochs: Tuple[EpochInput, ...]
    registration: str = "none"
    icp: IcpParams = field(default_factory=IcpParams)
    detection: ChangeParams = field(default_factory=ChangeParams)
    grid_size: Optional[float] = None
    output_dir: str = "out"
    report_version: int = REPORT_VERSION
    seed: int = 0
    threads: Optional[int] = None

    def __post_init__(self) -> None:
        if len(self.epochs) < 2:
            raise ValueError(
                f"epochs: detection needs at least two epochs, got {len(self.epochs)}"
            )
        if self.registration not in _REGISTRATION_MODES:
            raise ValueError(
                f"registration: expected one of {_REGISTRATION_MODES}, got {self.registration!r}"
            )
        kinds = {
            "datetime"
            if isinstance(e.timestamp, datetime.datetime)
            else "date"
            if isinstance(e.timestamp, datetime.date)
            else "number"
            for e in self.epochs
        }
        if len(kinds) > 1:
            raise ValueError("epochs: timestamps mix incompatible kinds")
        stamps = [e.timestamp for e in self.epochs]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("epochs: timestamps must be strictly increasing")
        if self.grid_size is not None and self.grid_size <= 0:
            raise ValueError(f"grid_size: must be > 0, got {self.grid_size}")
        if self.threads is not None and self.threads < 1:
            raise ValueError(f"threads: must be >= 1, got {self.threads}")


def _require(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise ValueError(f"missing config key: {_join(path, key)}")
    return mapping[key]


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _check_keys(mapping: dict, allowed, path: str) -> None:
    if not isinstance(mapping, dict):
        raise ValueError(f"{path or 'config'}: expected a mapping")
    for key in mapping:
        if key not in allowed:
            raise ValueError(f"unknown config key: {_join(path, key)}")


def _parse_timestamp(value, path: str):
    if isinstance(value, bool) or value is None:
        raise ValueError(f"{path}: expected a number or ISO date")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, datetime.datetime):
        return value
    if isinstance(value, datetime.date):
        return value
    if isinstance(value, str):
        try:
            return datetime.date.fromisoformat(value)
        except ValueError as exc:
            raise ValueError(f"{path}: not an ISO date: {value!r}") from exc
    raise ValueError(f"{path}: expected a number or ISO date, got {type(value).__name__}")


def _parse_epochs(raw, path: str) -> Tuple[EpochInput, ...]:
    if not isinstance(raw, list):
        raise ValueError(f"{path}: expected a list of epochs")
    epochs = []
    for i, entry in enumerate(raw):
        entry_path = f"{path}[{i}]"
        _check_keys(entry, {"path", "timestamp"}, entry_path)
        epochs.append(
            EpochInput(
                path=str(_require(entry, "path", entry_path)),
                timestamp=_parse_timestamp(
                    _require(entry, "timestamp", entry_path), _join(entry_path, "timestamp")
                ),
            )
        )
    return tuple(epochs)


def _parse_section(raw, path: str, factory, fields: dict):
    """Build a params dataclass from a config section, reporting offending
    keys by their dotted path."""
    if raw is None:
        raw = {}
    _check_keys(raw, set(fields), path)
    kwargs = {}
    for key, convert in fields.items():
        if key in raw:
            try:
                kwargs[key] = convert(raw[key])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{_join(path, key)}: {exc}") from exc
    try:
        return factory(**kwargs)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def _thresholds(value):
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    return float(value)


def _optional_float(value):
    return None if value is None else float(value)


_ICP_FIELDS = {
    "max_iterations": int,
    "convergence_threshold": float,
    "rejection_distance": float,
    "trim_fraction": float,
}

_DETECTION_FIELDS = {
    "start_depth": int,
    "max_depth": int,
    "subvoxels_per_axis": int,
    "thresholds": _thresholds,
    "normalized": bool,
    "component_radius": _optional_float,
    "component_min_size": int,
}

_TOP_KEYS = {
    "epochs",
    "registration",
    "icp",
    "detection",
    "grid_size",
    "output_dir",
    "report_version",
    "seed",
    "threads",
}


def parse_config_text(text: str) -> PipelineConfig:
    """Parse a config document from a string; see parse_config."""
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    _check_keys(raw, _TOP_KEYS, "")
    epochs = _parse_epochs(_require(raw, "epochs", ""), "epochs")
    return PipelineConfig(
        epochs=epochs,
        registration=raw.get("registration", "none"),
        icp=_parse_section(raw.get("icp"), "icp", IcpParams, _ICP_FIELDS),
        detection=_parse_section(
            raw.get("detection"), "detection", ChangeParams, _DETECTION_FIELDS
        ),
        grid_size=_optional_float(raw.get("grid_size")),
        output_dir=str(raw.get("output_dir", "out")),
        report_version=int(raw.get("report_version", REPORT_VERSION)),
        seed=int(raw.get("seed", 0)),
        threads=None if raw.get("threads") is None else int(raw["threads"]),
    )


def parse_config(path) -> PipelineConfig:
    """Load and validate a pipeline config file.

    Unknown keys, missing required keys, and invariant violations raise
    ValueError naming the offending key path. All defaults are resolved in
    the returned config.
    """
    with open(path) as handle:
        return parse_config_text(handle.read())


def _timestamp_value(timestamp):
    if isinstance(timestamp, (datetime.date, datetime.datetime)):
        return timestamp.isoformat()
    return timestamp


def config_to_dict(config: PipelineConfig) -> dict:
    """Full-provenance mapping: every field present, defaults included."""
    detection = config.detection
    thresholds = detection.thresholds
    if isinstance(thresholds, (list, tuple)):
        thresholds = [float(v) for v in thresholds]
    else:
        thresholds = float(thresholds)
    return {
        "epochs": [
            {"path": e.path, "timestamp": _timestamp_value(e.timestamp)}
            for e in config.epochs
        ],
        "registration": config.registration,
        "icp": {
            "max_iterations": config.icp.max_iterations,
            "convergence_threshold": config.icp.convergence_threshold,
            "rejection_distance": config.icp.rejection_distance,
            "trim_fraction": config.icp.trim_fraction,
        },
        "detection": {
            "start_depth": detection.start_depth,
            "max_depth": detection.max_depth,
            "subvoxels_per_axis": detection.subvoxels_per_axis,
            "thresholds": thresholds,
            "normalized": detection.normalized,
            "component_radius": detection.component_radius,
            "component_min_size": detection.component_min_size,
        },
        "grid_size": config.grid_size,
        "output_dir": config.output_dir,
        "report_version": config.report_version,
        "seed": config.seed,
        "threads": config.threads,
    }


def serialize_config(config: PipelineConfig) -> str:
    """Render a config back to YAML; parsing the result reproduces it."""
    return yaml.safe_dump(config_to_dict(config), sort_keys=True, default_flow_style=False)

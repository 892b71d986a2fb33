"""
Pipeline configuration: nested frozen dataclasses with strict JSON loading.

Unknown keys are rejected at every level so a typo in a tuned parameter
fails loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import InvariantViolation, UnknownKey
from .perception import GaussianColorModel, SegmentationParams
from .planning.fsm import TRANSITIONS
from .planning.pipeline import MotionConfig
from .planning.trajectories import ScanPattern
from .pose_estimation.ranking import UtilityWeights
from .sim.outcomes import OutcomeModel
from .sim.sensor import VirtualSensor


@dataclass(frozen=True)
class SegmentationConfig:
    mu: tuple = (90.0, 0.85, 0.75)
    sigma: tuple = (25.0, 0.0025, 0.0064)  # diagonal variances
    loglik_threshold: Optional[float] = None  # None: model constant - 8
    min_saturation: float = 0.3
    min_value: float = 0.1

    def model(self) -> GaussianColorModel:
        return GaussianColorModel(tuple(self.mu), tuple(self.sigma))

    def params(self) -> SegmentationParams:
        return SegmentationParams(self.loglik_threshold, self.min_saturation, self.min_value)


@dataclass(frozen=True)
class ClusterConfig:
    tolerance: float = 0.002
    min_size: int = 50
    merge_voxel: float = 0.001


@dataclass(frozen=True)
class RankingConfig:
    method: str = "NORMALS"  # or MODEL
    grasp_weights: tuple = (0.2, 0.5, 0.3)
    cut_weights: tuple = (0.1, 0.1, 0.8)
    patch_radius: float = 0.025
    boundary_radius: float = 0.008
    processing_voxel: float = 0.003
    outlier_radius: float = 0.01
    outlier_min_neighbors: int = 3
    utility_floor: float = 0.5
    vertical_offset: float = 0.03
    max_candidates: int = 5
    candidate_spacing: float = 0.01


@dataclass(frozen=True)
class FsmConfig:
    max_attempts: int = 3
    plan_failure_counts: bool = True
    queue_size: int = 2


@dataclass(frozen=True)
class PipelineConfig:
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    clustering: ClusterConfig = field(default_factory=ClusterConfig)
    ranking: RankingConfig = field(default_factory=RankingConfig)
    fsm: FsmConfig = field(default_factory=FsmConfig)
    scan: ScanPattern = field(default_factory=ScanPattern)
    sensor: VirtualSensor = field(default_factory=VirtualSensor)
    outcome: OutcomeModel = field(default_factory=OutcomeModel)
    motion: MotionConfig = field(default_factory=MotionConfig)
    occlusion_threshold: float = 0.5  # visible fraction below which a scan counts as occluded
    crop_radius: float = 0.7
    seed: int = 0

    def grasp_weights(self) -> UtilityWeights:
        return UtilityWeights(*self.ranking.grasp_weights)

    def cut_weights(self) -> UtilityWeights:
        return UtilityWeights(*self.ranking.cut_weights)

    def validate(self) -> None:
        """Raise InvariantViolation when a field is out of range."""
        self.grasp_weights()
        self.cut_weights()
        r, c = self.ranking, self.clustering
        checks = [
            (c.tolerance > 0, "cluster tolerance must be positive"),
            (c.min_size >= 1, "cluster min_size must be >= 1"),
            (c.merge_voxel > 0, "merge voxel must be positive"),
            (r.method in ("MODEL", "NORMALS"), f"grasp method must be MODEL or NORMALS, got {r.method!r}"),
            (r.patch_radius > 0 and r.boundary_radius > 0 and r.processing_voxel > 0,
             "radii and voxel sizes must be positive"),
            (0 <= r.utility_floor <= 1, "utility floor must lie in [0, 1]"),
            (r.max_candidates >= 1, "max_candidates must be >= 1"),
            (self.fsm.max_attempts >= 1, "max_attempts must be >= 1"),
            (self.fsm.queue_size >= 1, "queue_size must be >= 1"),
            (0 <= self.occlusion_threshold <= 1, "occlusion threshold must lie in [0, 1]"),
            (len(self.segmentation.mu) == 3 and len(self.segmentation.sigma) == 3
             and all(s > 0 for s in self.segmentation.sigma), "colour model needs 3 means and 3 positive variances"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvariantViolation(msg)
        try:
            self.scan.validate()
        except Exception as exc:
            raise InvariantViolation(str(exc)) from exc

    def to_json(self) -> dict:
        return _to_plain(self)


def _to_plain(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _merge(cls, default, data: dict, where: str):
    if not isinstance(data, dict):
        raise InvariantViolation(f"{where or 'config'} must be a JSON object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise UnknownKey(f"unknown config key {where + '.' if where else ''}{unknown[0]}")
    kw = {}
    for name, f in names.items():
        cur = getattr(default, name)
        if name not in data:
            continue
        val = data[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(cur):
            kw[name] = _merge(type(cur), cur, val, path)
        elif isinstance(cur, tuple):
            if not isinstance(val, (list, tuple)):
                raise InvariantViolation(f"{path} must be a list")
            kw[name] = tuple(val)
        else:
            kw[name] = val
    try:
        return dataclasses.replace(default, **kw)
    except (TypeError, ValueError) as exc:
        raise InvariantViolation(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = _merge(PipelineConfig, PipelineConfig(), data, "")
    cfg.validate()
    return cfg


def load_config(path=None) -> PipelineConfig:
    """Defaults overlaid with a JSON file; ``None`` gives the defaults."""
    if path is None:
        cfg = PipelineConfig()
        cfg.validate()
        return cfg
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvariantViolation(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: PipelineConfig, path=None) -> str:
    text = json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def transition_table_json() -> str:
    """The legal (state, event) pairs of the harvest state machine."""
    rows = [[s.value, e.value] for (s, e) in TRANSITIONS]
    return json.dumps({"transitions": rows}, indent=1)

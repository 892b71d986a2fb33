"""End-to-end simulated harvesting trials and their statistics."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..cloud import ColorPointCloud, RigidTransform, estimate_normals, merge_views, voxel_downsample
from ..errors import EmptyRecords, HarvestError, InvalidSpec, NoCandidatesAboveFloor, NoValidNormals
from ..perception import euclidean_cluster, remove_outliers, segment, select_candidate
from ..planning.fsm import SensorEvent
from ..planning.pipeline import ProcessedPepper, run_pipeline
from ..planning.trajectories import Stage, scan_waypoints
from ..pose_estimation.ranking import Mode, estimate_cut_pose, score_candidates
from ..pose_estimation.superellipsoid import cut_from_model, fit_superellipsoid, grasp_from_model
from .outcomes import simulate_attach, simulate_detach
from .scene import SceneSpec, World, generate_scene
from .sensor import render_views

log = logging.getLogger(__name__)

NOTE_CODES = ("XD", "MD", "IS", "OC", "OB")
RECORD_COLUMNS = ["id", "attempts", "attach", "detach", "notes"]


@dataclass(frozen=True)
class TrialRecord:
    id: int
    attempts: int
    attach: str
    detach: str
    notes: tuple = ()

    def __post_init__(self):
        if self.attempts < 1:
            raise InvalidSpec(f"record {self.id}: attempts must be >= 1")
        if self.attach not in ("S", "F") or self.detach not in ("S", "F"):
            raise InvalidSpec(f"record {self.id}: attach/detach must be S or F")
        bad = [n for n in self.notes if n not in NOTE_CODES]
        if bad:
            raise InvalidSpec(f"record {self.id}: unknown note code {bad[0]!r}")
        # canonical order, no repeats
        object.__setattr__(self, "notes", tuple(n for n in NOTE_CODES if n in self.notes))


def write_records(records: Sequence[TrialRecord], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([r.id, r.attempts, r.attach, r.detach, " ".join(r.notes)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_records(text: str) -> list:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        try:
            notes = tuple(n for n in (row.get("notes") or "").replace(",", " ").split() if n)
            out.append(TrialRecord(int(row["id"]), int(row["attempts"]), row["attach"].strip(),
                                   row["detach"].strip(), notes))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpec(f"bad record row {row}: {exc}") from exc
    return out


def read_records(path) -> list:
    return parse_records(Path(path).read_text())


def fixture_text(name: str) -> str:
    """Text of a packaged fixture (``trial1.csv`` or ``trial2.csv``)."""
    return resources.files("harvest.sim").joinpath("data", name).read_text()


@dataclass(frozen=True)
class Rate:
    num: int
    den: int

    @property
    def value(self) -> float:
        return self.num / self.den

    def to_json(self) -> dict:
        return {"num": self.num, "den": self.den, "rate": round(self.value, 6)}


@dataclass(frozen=True)
class TrialStats:
    n: int
    detach: Rate
    attach: Rate
    harvest: Rate
    attempts_total: int

    @property
    def mean_attempts(self) -> float:
        return self.attempts_total / self.n

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "detach_rate": self.detach.to_json(),
            "attach_rate": self.attach.to_json(),
            "harvest_rate": self.harvest.to_json(),
            "mean_attempts": round(self.mean_attempts, 6),
            "attempts_total": self.attempts_total,
        }


def aggregate(records: Sequence[TrialRecord]) -> TrialStats:
    """Exact success counts over the records; attach and detach are tallied independently."""
    n = len(records)
    if n == 0:
        raise EmptyRecords("no records to aggregate")
    att = sum(r.attach == "S" for r in records)
    det = sum(r.detach == "S" for r in records)
    both = sum(r.attach == "S" and r.detach == "S" for r in records)
    return TrialStats(n, Rate(det, n), Rate(att, n), Rate(both, n), sum(r.attempts for r in records))


# ------------------------------------------------------------------- trials

def _spread(candidates, k: int, spacing: float) -> list:
    """Greedy best-first pick of up to ``k`` candidates at least ``spacing`` apart."""
    chosen = []
    for c in candidates:
        if all(np.linalg.norm(c.position - o.position) >= spacing for o in chosen):
            chosen.append(c)
            if len(chosen) == k:
                break
    return chosen


def pepper_rng(scene: SceneSpec, cfg, pid: int) -> np.random.Generator:
    return np.random.default_rng([int(scene.seed), int(cfg.seed), int(pid)])


def process_pepper(world: World, pid: int, cfg) -> ProcessedPepper:
    """Scan, segment and rank one pepper of the world."""
    truth = world.spec.pepper(pid)
    notes = ["IS"] if truth.irregular else []
    centre = truth.model.center
    row_frame = RigidTransform(np.eye(3), centre)
    scan = scan_waypoints(cfg.scan, row_frame)
    views, stats = render_views(world, scan, cfg.sensor, pepper_rng(world.spec, cfg, pid),
                                crop_radius=cfg.crop_radius, return_stats=True)
    if stats.visible_fraction(pid) < cfg.occlusion_threshold:
        notes.append("OC")
    merged = merge_views(views, cfg.clustering.merge_voxel)
    mask = segment(merged, cfg.segmentation.model(), cfg.segmentation.params())
    clusters = euclidean_cluster(merged, mask, cfg.clustering.tolerance, cfg.clustering.min_size)
    if not clusters:
        return ProcessedPepper(pid, notes=tuple(notes), error="NoClusters")
    ee = row_frame.apply(np.array([[0.0, -cfg.scan.row_offset, 0.0]]))[0]
    chosen = clusters[select_candidate(clusters, ee)]
    sub = merged.subset(chosen.ids)
    p, c = voxel_downsample(sub.positions, sub.colors, cfg.ranking.processing_voxel)
    cloud = ColorPointCloud(p, c, viewpoint=merged.viewpoint)
    keep = remove_outliers(cloud, np.arange(len(cloud)), cfg.ranking.outlier_radius,
                           cfg.ranking.outlier_min_neighbors)
    cloud = cloud.subset(keep)
    rk = cfg.ranking
    if rk.method == "MODEL":
        model = fit_superellipsoid(cloud.positions)
        return ProcessedPepper(pid, [grasp_from_model(model)], cut_from_model(model, rk.vertical_offset),
                               tuple(notes))
    cloud = estimate_normals(cloud, rk.patch_radius)
    ids = np.arange(len(cloud))
    grasps = score_candidates(cloud, ids, cfg.grasp_weights(), Mode.GRASP, boundary_radius=rk.boundary_radius)
    cut = None
    try:
        cuts = score_candidates(cloud, ids, cfg.cut_weights(), Mode.CUT, boundary_radius=rk.boundary_radius)
        cut = estimate_cut_pose(cuts, rk.utility_floor, rk.vertical_offset)
    except (NoCandidatesAboveFloor, NoValidNormals) as exc:
        log.info("pepper %s: no cut pose (%s)", pid, exc)
    return ProcessedPepper(pid, _spread(grasps, rk.max_candidates, rk.candidate_spacing), cut, tuple(notes))


class SimHarvester:
    """Answers the pipeline's actions from the geometric outcome models."""

    def __init__(self, world: World, cfg):
        self.world = world
        self.cfg = cfg
        self.notes: dict = {}
        self.detached: dict = {}

    def _note(self, pid, codes):
        self.notes.setdefault(pid, set()).update(codes)

    def attach(self, pid, grasp, traj):
        res = simulate_attach(grasp, self.world, self.cfg.outcome, pepper_id=pid)
        self._note(pid, res.notes)
        return res.event

    def separate(self, pid, traj):
        return SensorEvent.MicroswitchDecoupled

    def detach(self, pid, traj):
        res = simulate_detach(traj, self.world.spec.pepper(pid), self.cfg.outcome)
        self._note(pid, res.notes)
        self.detached[pid] = res.success
        return SensorEvent.TrajectoryDone

    def recouple(self, pid):
        return SensorEvent.MicroswitchCoupled

    def plan_fails(self, pid, stage: Stage) -> bool:
        return False


def run_trial(scene: SceneSpec, cfg=None, world: Optional[World] = None, return_log: bool = False):
    """One record per pepper (sorted by id); per-pepper errors become failed records."""
    from ..config import PipelineConfig

    cfg = cfg if cfg is not None else PipelineConfig()
    cfg.validate()
    world = world if world is not None else generate_scene(scene)
    ids = sorted(p.id for p in scene.peppers)
    harvester = SimHarvester(world, cfg)
    result = run_pipeline(ids, lambda pid: process_pepper(world, pid, cfg), harvester,
                          max_attempts=cfg.fsm.max_attempts, motion=cfg.motion,
                          queue_size=cfg.fsm.queue_size, plan_failure_counts=cfg.fsm.plan_failure_counts)
    records = []
    for pid in ids:
        out = result.outcomes[pid]
        notes = set(out.notes) | harvester.notes.get(pid, set())
        records.append(TrialRecord(pid, max(1, out.attempts), "S" if out.attached else "F",
                                   "S" if harvester.detached.get(pid, False) else "F", tuple(notes)))
    return (records, result.log) if return_log else records


def run_trials(scenes: Sequence[SceneSpec], cfg=None, jobs: int = 1) -> list:
    """Records per scene, in input order regardless of scheduling."""
    if jobs <= 1 or len(scenes) <= 1:
        return [run_trial(s, cfg) for s in scenes]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda s: run_trial(s, cfg), scenes))

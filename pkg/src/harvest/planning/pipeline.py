"""
Two-worker harvest pipeline.

A processor thread turns segmented peppers into grasp/cut candidates and
pushes them onto a bounded FIFO; a harvester thread pops them and drives the
state machine, asking a :class:`Harvester` for the sensor events that
close each action. Every step is appended to a totally ordered action log.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from ..pose_estimation.poses import CutPose, ScoredPose
from .fsm import FsmContext, HarvestState, Phase, SensorEvent, fsm_step
from .trajectories import (
    DEFAULT_FOLLOW_THROUGH,
    DEFAULT_RISE,
    DEFAULT_STANDOFF,
    DEFAULT_SWEEP,
    PlanarObstacle,
    Stage,
    Trajectory,
    attach_trajectory,
    check_collision,
    cut_trajectory,
    separation_move,
)

log = logging.getLogger(__name__)


@dataclass
class ProcessedPepper:
    pepper_id: int
    candidates: list = field(default_factory=list)  # ScoredPose, best first
    cut: Optional[CutPose] = None
    notes: tuple = ()
    error: Optional[str] = None


@dataclass(frozen=True)
class LogRecord:
    seq: int
    timestamp: float
    worker: str
    pepper_id: Optional[int]
    state: str
    event: Optional[str] = None
    stage: Optional[str] = None
    detail: Optional[dict] = None

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None}, sort_keys=True)


class ActionLog:
    """Append-only, thread-safe, totally ordered log."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list = []
        self._t0 = time.monotonic()

    def append(self, worker, pepper_id, state, event=None, stage=None, detail=None) -> LogRecord:
        with self._lock:
            rec = LogRecord(len(self._records), time.monotonic() - self._t0, worker, pepper_id,
                            state, event, stage, detail)
            self._records.append(rec)
            return rec

    @property
    def records(self) -> list:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)


class Harvester(Protocol):
    def attach(self, pepper_id: int, grasp: ScoredPose, traj: Trajectory) -> SensorEvent: ...

    def separate(self, pepper_id: int, traj: Trajectory) -> SensorEvent: ...

    def detach(self, pepper_id: int, traj: Trajectory) -> SensorEvent: ...

    def recouple(self, pepper_id: int) -> SensorEvent: ...

    def plan_fails(self, pepper_id: int, stage: Stage) -> bool: ...


class NullHarvester:
    """Everything succeeds; useful for dry runs."""

    def attach(self, pepper_id, grasp, traj):
        return SensorEvent.PressureAttached

    def separate(self, pepper_id, traj):
        return SensorEvent.MicroswitchDecoupled

    def detach(self, pepper_id, traj):
        return SensorEvent.TrajectoryDone

    def recouple(self, pepper_id):
        return SensorEvent.MicroswitchCoupled

    def plan_fails(self, pepper_id, stage):
        return False


@dataclass(frozen=True)
class MotionConfig:
    standoff: float = DEFAULT_STANDOFF
    rise: float = DEFAULT_RISE
    sweep: float = DEFAULT_SWEEP
    follow_through: float = DEFAULT_FOLLOW_THROUGH
    speed: float = 0.1


@dataclass
class PepperOutcome:
    pepper_id: int
    attempts: int = 0
    attached: bool = False
    detach_executed: bool = False
    status: str = "pending"
    notes: tuple = ()


@dataclass
class PipelineResult:
    log: ActionLog
    final_state: HarvestState
    outcomes: dict  # pepper_id -> PepperOutcome


_DONE = object()


def run_pipeline(pepper_ids: Sequence[int], process: Callable[[int], ProcessedPepper], harvester: Harvester,
                 max_attempts: int = 3, obstacle: Optional[PlanarObstacle] = None,
                 motion: MotionConfig = MotionConfig(), queue_size: int = 2,
                 plan_failure_counts: bool = True) -> PipelineResult:
    """Process and harvest ``pepper_ids`` concurrently; see module docstring."""
    ids = list(pepper_ids)
    alog = ActionLog()
    fifo: queue.Queue = queue.Queue(maxsize=max(1, queue_size))
    outcomes = {pid: PepperOutcome(pid) for pid in ids}

    def producer():
        for pid in ids:
            alog.append("processor", pid, "Process", stage=Stage.SCAN.value)
            try:
                item = process(pid)
            except Exception as exc:  # a broken pepper must not stop the trial
                log.warning("processing pepper %s failed: %s", pid, exc)
                item = ProcessedPepper(pid, error=f"{type(exc).__name__}: {exc}")
            alog.append("processor", pid, "Processed",
                        detail={"candidates": len(item.candidates), "error": item.error})
            fifo.put(item)
        fifo.put(_DONE)

    worker = threading.Thread(target=producer, name="processor", daemon=True)
    worker.start()

    state = HarvestState(Phase.SelectPepper) if ids else HarvestState(Phase.Done)
    ctx = FsmContext(max_attempts=max_attempts, n_candidates=0, n_peppers=len(ids),
                     plan_failure_counts=plan_failure_counts)
    item: Optional[ProcessedPepper] = None
    attach_pose = None
    cut_traj = None

    def finish(pid, status):
        out = outcomes[pid]
        out.status = status
        alog.append("harvester", pid, "Terminal", detail={
            "status": status, "attempts": out.attempts, "attached": out.attached,
            "detach_executed": out.detach_executed})

    while not state.terminal:
        pid = item.pepper_id if item is not None else None
        phase = state.phase
        if phase is Phase.SelectPepper:
            got = fifo.get()
            assert got is not _DONE
            item = got
            pid = item.pepper_id
            outcomes[pid].notes = tuple(item.notes)
            ctx = FsmContext(max_attempts=max_attempts, n_candidates=len(item.candidates),
                             n_peppers=len(ids), plan_failure_counts=plan_failure_counts)
            alog.append("harvester", pid, phase.value, detail={"candidates": len(item.candidates)})
            event = SensorEvent.TrajectoryDone if item.candidates else SensorEvent.PlanFailed
        elif phase is Phase.PlanAttach:
            grasp = item.candidates[state.cursor]
            traj = attach_trajectory(grasp, motion.standoff, motion.speed)
            blocked = obstacle is not None and check_collision(traj, obstacle) is not None
            if blocked or harvester.plan_fails(pid, Stage.ATTACH):
                event = SensorEvent.PlanFailed
            else:
                event = SensorEvent.TrajectoryDone
                attach_pose = (grasp, traj)
        elif phase is Phase.ExecuteAttach:
            grasp, traj = attach_pose
            outcomes[pid].attempts = state.attempts
            alog.append("harvester", pid, phase.value, stage=Stage.ATTACH.value,
                        detail={"attempt": state.attempts, "candidate": state.cursor})
            event = harvester.attach(pid, grasp, traj)
            if event is SensorEvent.PressureAttached:
                outcomes[pid].attached = True
        elif phase is Phase.Separate:
            grasp, _ = attach_pose
            traj = separation_move(grasp.position, grasp.orientation, motion.rise, motion.speed)
            alog.append("harvester", pid, phase.value, stage=Stage.SEPARATE.value)
            event = harvester.separate(pid, traj)
            if event is SensorEvent.PressureLost:
                outcomes[pid].attached = False
        elif phase is Phase.PlanDetach:
            cut_traj = None
            if item.cut is not None:
                cut_traj = cut_trajectory(item.cut, motion.sweep, motion.speed, motion.follow_through)
                if obstacle is not None and check_collision(cut_traj, obstacle) is not None:
                    cut_traj = None
            if cut_traj is None or harvester.plan_fails(pid, Stage.DETACH):
                event = SensorEvent.PlanFailed
            else:
                event = SensorEvent.TrajectoryDone
        elif phase is Phase.ExecuteDetach:
            alog.append("harvester", pid, phase.value, stage=Stage.DETACH.value)
            outcomes[pid].detach_executed = True
            event = harvester.detach(pid, cut_traj)
        elif phase is Phase.Recouple:
            event = harvester.recouple(pid)
        else:  # Release, NextPepper
            event = SensorEvent.TrajectoryDone
        new = fsm_step(state, event, ctx)
        alog.append("harvester", pid, phase.value, event=event.value, detail={"next": new.phase.value})
        if pid is not None and (new.pepper != state.pepper or new.terminal):
            finish(pid, "failed" if new.phase is Phase.Failed else "done")
            item = None
        state = new

    # drain so the producer can exit; unharvested peppers still get a terminal record
    while True:
        got = fifo.get()
        if got is _DONE:
            break
        finish(got.pepper_id, "aborted")
    worker.join()
    return PipelineResult(alog, state, outcomes)

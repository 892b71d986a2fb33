import math
import time
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harvest.cloud import RigidTransform
from harvest.errors import IllegalTransition, InvalidPattern
from harvest.planning.fsm import (
    TERMINAL,
    TRANSITIONS,
    FsmContext,
    HarvestState,
    Phase,
    SensorEvent,
    fsm_step,
    legal_events,
)
from harvest.planning.pipeline import MotionConfig, NullHarvester, ProcessedPepper, run_pipeline
from harvest.planning.trajectories import (
    MAX_SPACING,
    PlanarObstacle,
    ScanPattern,
    Stage,
    attach_trajectory,
    check_collision,
    cut_trajectory,
    densify,
    scan_waypoints,
    separation_move,
)
from harvest.pose_estimation.poses import CutPose, ScoredPose, level_orientation, upright_orientation

from conftest import random_rotation


def grasp(position=(0, 0, 0), approach=(0, 1, 0)):
    return ScoredPose(np.asarray(position, float), upright_orientation(approach), 1, 1, 1, 1.0)


def check_densified(traj):
    assert np.all(np.diff(traj.timestamps) > 0)
    assert np.max(np.linalg.norm(np.diff(traj.positions, axis=0), axis=1)) <= MAX_SPACING + 1e-12


# ---------------------------------------------------------------- scan patterns

def test_boustrophedon_length_and_duration():
    t = scan_waypoints(ScanPattern("boustrophedon", 0.35, 0.4, 3, row_offset=0.25, speed=0.1))
    assert t.path_length == pytest.approx(1.45, abs=1e-9)
    assert t.duration == pytest.approx(14.5, abs=1e-9)
    key = t.positions[list(t.key_indices)]
    assert len(key) == 6
    assert len(np.unique(np.round(key[:, 2], 9))) == 3
    assert np.allclose(t.positions[:, 1], -0.25)
    check_densified(t)


def test_diamond_length():
    t = scan_waypoints(ScanPattern("diamond", radius=0.4, row_offset=0.3))
    assert len(t.key_indices) == 5
    assert np.allclose(t.start, t.end)
    assert t.path_length == pytest.approx(4 * 0.4 * math.sqrt(2), abs=1e-9)


def test_single_segment_is_straight_pass():
    t = scan_waypoints(ScanPattern("boustrophedon", 0.35, 0.4, 1))
    assert t.path_length == pytest.approx(0.35, abs=1e-12)
    assert np.ptp(t.positions[:, 2]) == 0.0


def test_scan_camera_faces_row():
    frame = RigidTransform(np.eye(3), [1.0, 0.0, 1.2])
    t = scan_waypoints(ScanPattern(), frame)
    assert np.allclose(t.orientations[:, :, 2], [0, 1, 0])
    assert np.allclose(t.positions.mean(axis=0)[[0, 2]], [1.0, 1.2], atol=0.06)


@pytest.mark.parametrize("bad", [
    ScanPattern("spiral"), ScanPattern(width=0), ScanPattern(segments=0),
    ScanPattern(speed=0), ScanPattern("diamond", radius=-1),
])
def test_invalid_patterns(bad):
    with pytest.raises(InvalidPattern):
        scan_waypoints(bad)


# ---------------------------------------------------------------- tool trajectories

def test_attach_trajectory_example():
    t = attach_trajectory(grasp(), 0.1)
    assert np.allclose(t.start, [0, -0.1, 0])
    assert np.allclose(t.end, [0, 0, 0])
    assert len(t) >= 21
    assert t.stage is Stage.ATTACH
    check_densified(t)


def test_attach_trajectory_equivariant(rng):
    g = grasp()
    T = RigidTransform(random_rotation(rng), rng.normal(size=3))
    moved = ScoredPose(T.apply(g.position[None])[0], T.rotation @ g.orientation, 1, 1, 1, 1.0)
    a, b = attach_trajectory(g), attach_trajectory(moved)
    assert np.allclose(T.apply(a.positions), b.positions, atol=1e-12)
    assert np.allclose(np.einsum("ij,njk->nik", T.rotation, a.orientations), b.orientations, atol=1e-12)


def test_separation_move():
    R = upright_orientation([0.3, 1, 0])
    t = separation_move([0.2, 0.1, 1.0], R, 0.05)
    assert t.end[2] == pytest.approx(1.05)
    assert np.allclose(t.positions[:, :2], [0.2, 0.1], atol=0)
    assert np.max(np.abs(t.orientations - R)) <= 1e-12


def test_cut_trajectory_example():
    cut = CutPose(np.array([0, 0, 1.0]), level_orientation())
    t = cut_trajectory(cut, 0.08)
    assert np.allclose(t.start, [0, -0.08, 1])
    assert np.min(np.linalg.norm(t.positions - [0, 0, 1], axis=1)) <= 1e-12
    assert np.ptp(t.positions[:, 2]) == 0.0
    assert np.all(np.abs(t.orientations[:, :, 2] @ [0, 0, 1] - 1) <= 1e-9)


@given(st.floats(-math.pi, math.pi), st.floats(0.01, 0.2), st.floats(0, 0.05))
def test_cut_trajectory_level(yaw, sweep, follow):
    R = level_orientation([math.cos(yaw), math.sin(yaw), 0])
    t = cut_trajectory(CutPose(np.array([0.1, 0.2, 1.1]), R), sweep, follow_through=follow)
    assert np.ptp(t.positions[:, 2]) <= 1e-12
    assert np.all(np.abs(t.orientations[:, :, 2] @ [0, 0, 1] - 1) <= 1e-9)
    check_densified(t)


@given(st.lists(st.tuples(*[st.floats(-1, 1)] * 3), min_size=2, max_size=6), st.floats(0.01, 1))
def test_densify_spacing_and_time(verts, speed):
    V = np.array(verts)
    if np.all(np.linalg.norm(np.diff(V, axis=0), axis=1) == 0):
        return
    t = densify(V, np.eye(3), speed, Stage.SCAN)
    check_densified(t)
    assert t.duration == pytest.approx(t.path_length / speed, rel=1e-9)
    assert np.allclose(t.positions[list(t.key_indices)], V)


# ---------------------------------------------------------------- collision

def test_collision_all_in_front():
    assert check_collision(attach_trajectory(grasp()), PlanarObstacle.behind_row(0.0, 0.1)) is None


@given(st.floats(0.011, 0.19))
def test_collision_first_crossing(depth):
    plane = PlanarObstacle(np.array([0, depth, 0]), np.array([0, -1.0, 0]))
    t = attach_trajectory(grasp([0, 0.2, 0]), 0.2)
    idx = check_collision(t, plane)
    # analytic crossing parameter along the segment
    s = (depth - t.start[1]) / (t.end[1] - t.start[1])
    crossing = s * t.path_length
    arc = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(t.positions, axis=0), axis=1))])
    assert idx is not None
    assert arc[idx] >= crossing - 1e-12
    assert arc[idx] - crossing <= MAX_SPACING + 1e-12


def test_collision_on_plane_is_allowed():
    t = attach_trajectory(grasp([0, 0.1, 0]), 0.1)
    assert check_collision(t, PlanarObstacle(np.array([0, 0.1, 0]), np.array([0, -1.0, 0]))) is None


def test_obstacle_needs_unit_normal():
    with pytest.raises(ValueError):
        PlanarObstacle(np.zeros(3), np.array([0, 2.0, 0]))


# ---------------------------------------------------------------- state machine

def at(phase, **kw):
    return HarvestState(phase, **kw)


def test_attach_retry_moves_to_next_candidate():
    ctx = FsmContext(max_attempts=3, n_candidates=5)
    s = fsm_step(at(Phase.ExecuteAttach, attempts=1, cursor=0), SensorEvent.PressureLost, ctx)
    assert s.phase is Phase.PlanAttach and s.cursor == 1


def test_attach_gives_up_after_max():
    ctx = FsmContext(max_attempts=3, n_candidates=5)
    s = fsm_step(at(Phase.ExecuteAttach, attempts=3, cursor=2), SensorEvent.PressureLost, ctx)
    assert s.phase is Phase.NextPepper


def test_illegal_pair_raises():
    with pytest.raises(IllegalTransition):
        fsm_step(at(Phase.Scan), SensorEvent.PressureAttached)


@pytest.mark.parametrize("phase,event,expected", [
    (Phase.ExecuteAttach, SensorEvent.PressureAttached, Phase.Separate),
    (Phase.Separate, SensorEvent.MicroswitchDecoupled, Phase.PlanDetach),
    (Phase.ExecuteDetach, SensorEvent.TrajectoryDone, Phase.Release),
    (Phase.Release, SensorEvent.TrajectoryDone, Phase.Recouple),
])
def test_key_rows(phase, event, expected):
    assert fsm_step(at(phase, attempts=1), event, FsmContext(n_candidates=2)).phase is expected


def test_recouple_ends_or_continues():
    assert fsm_step(at(Phase.Recouple), SensorEvent.MicroswitchCoupled, FsmContext(n_peppers=1)).phase is Phase.Done
    nxt = fsm_step(at(Phase.Recouple), SensorEvent.MicroswitchCoupled, FsmContext(n_peppers=2))
    assert nxt.phase is Phase.NextPepper


def test_table_is_closed():
    for phase in Phase:
        for ev in SensorEvent:
            if (phase, ev) in TRANSITIONS:
                continue
            with pytest.raises(IllegalTransition):
                fsm_step(at(phase), ev)


@pytest.mark.parametrize("ctx", [
    FsmContext(max_attempts=3, n_candidates=3, n_peppers=2, base_moves=1),
    FsmContext(max_attempts=2, n_candidates=5, n_peppers=3, base_moves=0, plan_failure_counts=False),
    FsmContext(max_attempts=6, n_candidates=6, n_peppers=1),
    FsmContext(n_peppers=0, base_moves=2),
])
def test_every_event_sequence_terminates(ctx):
    """Exhaustive small-model check over all legal event sequences.

    From every reachable state the machine reaches Done, Failed or the end of
    the current pepper (NextPepper) within 50 events, and the full state graph
    has no cycles, so every run of the whole row terminates.
    """
    stop_at = TERMINAL | {Phase.NextPepper}
    active = set()

    @lru_cache(maxsize=None)
    def to_terminal(state):
        if state.terminal:
            return 0
        assert state not in active, f"cycle through {state}"
        active.add(state)
        evs = legal_events(state.phase)
        assert evs, f"{state.phase} has no way out"
        best = 0
        for e in evs:
            nxt = fsm_step(state, e, ctx)
            assert nxt.attempts <= ctx.max_attempts
            best = max(best, 1 + to_terminal(nxt))
        active.discard(state)
        return best

    @lru_cache(maxsize=None)
    def to_pepper_end(state):
        if state.phase in stop_at:
            return 0
        return max(1 + to_pepper_end(fsm_step(state, e, ctx)) for e in legal_events(state.phase))

    assert to_terminal(HarvestState(Phase.Scan)) > 0
    reachable = _reachable(HarvestState(Phase.Scan), ctx)
    assert all(to_pepper_end(s) <= 50 for s in reachable)


def _reachable(start, ctx):
    seen, todo = {start}, [start]
    while todo:
        s = todo.pop()
        if s.terminal:
            continue
        for e in legal_events(s.phase):
            n = fsm_step(s, e, ctx)
            if n not in seen:
                seen.add(n)
                todo.append(n)
    return seen


def test_random_walks_respect_attempt_limit():
    g = np.random.default_rng(7)
    for _ in range(1000):
        ctx = FsmContext(max_attempts=int(g.integers(1, 6)), n_candidates=int(g.integers(0, 8)),
                         n_peppers=int(g.integers(0, 4)), base_moves=int(g.integers(0, 2)))
        s = HarvestState(Phase.Scan)
        steps = 0
        while s.phase not in TERMINAL:
            evs = legal_events(s.phase)
            s = fsm_step(s, evs[g.integers(len(evs))], ctx)
            assert s.attempts <= ctx.max_attempts
            steps = 0 if s.phase is Phase.NextPepper else steps + 1
            assert steps <= 50


# ---------------------------------------------------------------- pipeline

def processed(pid, n=3):
    cands = [grasp([0.01 * k, 0, 1.0]) for k in range(n)]
    return ProcessedPepper(pid, cands, CutPose(np.array([0, 0, 1.07]), level_orientation()))


class ScriptedHarvester(NullHarvester):
    def __init__(self, attach_events):
        self.events = list(attach_events)

    def attach(self, pid, grasp, traj):
        return self.events.pop(0) if self.events else SensorEvent.PressureLost


def terminals(result):
    return [r for r in result.log.records if r.state == "Terminal"]


def test_zero_peppers():
    res = run_pipeline([], processed, NullHarvester())
    assert res.final_state.phase is Phase.Done
    assert len(res.log) == 0


def test_interleaving():
    def slow(pid):
        time.sleep(0.15)
        return processed(pid)

    res = run_pipeline([1, 2, 3], slow, NullHarvester(), queue_size=1)
    recs = res.log.records
    first_attach = next(r.seq for r in recs if r.state == "ExecuteAttach" and r.pepper_id == 1)
    third_done = next(r.seq for r in recs if r.state == "Processed" and r.pepper_id == 3)
    assert first_attach < third_done


def test_attach_failures_bounded():
    res = run_pipeline([0], lambda pid: processed(pid, 5), ScriptedHarvester([]), max_attempts=3)
    attaches = [r for r in res.log.records if r.state == "ExecuteAttach" and r.event is None]
    assert len(attaches) == 3
    after = [r for r in res.log.records if r.event == "PressureLost"]
    assert after[-1].detail["next"] == "NextPepper"
    assert res.outcomes[0].attempts == 3 and not res.outcomes[0].attached


def test_stage_order_and_terminal_records():
    res = run_pipeline([4, 5, 6], processed, NullHarvester())
    assert sorted(r.pepper_id for r in terminals(res)) == [4, 5, 6]
    for pid in (4, 5, 6):
        stages = [r.stage for r in res.log.records if r.pepper_id == pid and r.stage and r.event is None]
        order = [s for i, s in enumerate(stages) if s not in stages[:i]]
        assert order == ["SCAN", "ATTACH", "SEPARATE", "DETACH"]
    assert res.final_state.phase is Phase.Done
    seqs = [r.seq for r in res.log.records]
    assert seqs == list(range(len(seqs)))


def test_processing_error_is_isolated():
    def broken(pid):
        if pid == 1:
            raise RuntimeError("boom")
        return processed(pid)

    res = run_pipeline([0, 1, 2], broken, NullHarvester())
    assert [r.pepper_id for r in terminals(res)] == [0, 1, 2]
    assert res.outcomes[1].attempts == 0 and res.outcomes[2].attached


@settings(max_examples=60)
@given(st.lists(st.integers(0, 50), min_size=0, max_size=6, unique=True),
       st.lists(st.booleans(), max_size=30), st.integers(1, 4), st.integers(0, 5))
def test_pipeline_no_loss_no_duplication(ids, script, max_attempts, n_cand):
    events = [SensorEvent.PressureAttached if b else SensorEvent.PressureLost for b in script]
    res = run_pipeline(ids, lambda pid: processed(pid, n_cand), ScriptedHarvester(events),
                       max_attempts=max_attempts, motion=MotionConfig())
    done = [r.pepper_id for r in terminals(res)]
    assert sorted(done) == sorted(ids)
    for pid in ids:
        assert res.outcomes[pid].attempts <= max_attempts

"""
Harvest state machine.

The transition table is closed: any (state, event) pair not listed raises
IllegalTransition. ``TrajectoryDone`` doubles as the completion signal of
compute-only states (segmentation, selection, planning, release).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from ..errors import IllegalTransition


class Phase(enum.Enum):
    Scan = "Scan"
    Segment = "Segment"
    SelectPepper = "SelectPepper"
    PlanAttach = "PlanAttach"
    ExecuteAttach = "ExecuteAttach"
    Separate = "Separate"
    PlanDetach = "PlanDetach"
    ExecuteDetach = "ExecuteDetach"
    Release = "Release"
    Recouple = "Recouple"
    NextPepper = "NextPepper"
    MoveBase = "MoveBase"
    Done = "Done"
    Failed = "Failed"


class SensorEvent(enum.Enum):
    PressureAttached = "PressureAttached"
    PressureLost = "PressureLost"
    MicroswitchCoupled = "MicroswitchCoupled"
    MicroswitchDecoupled = "MicroswitchDecoupled"
    TrajectoryDone = "TrajectoryDone"
    PlanFailed = "PlanFailed"


TERMINAL = frozenset({Phase.Done, Phase.Failed})


@dataclass(frozen=True)
class FsmContext:
    """Limits the machine consults when branching.

    ``n_candidates`` is the grasp-candidate count of the current pepper,
    ``n_peppers`` the number of peppers at this base stop and ``base_moves``
    how many more stops remain after this one.
    """

    max_attempts: int = 3
    n_candidates: int = 1
    n_peppers: int = 1
    base_moves: int = 0
    plan_failure_counts: bool = True


@dataclass(frozen=True)
class HarvestState:
    phase: Phase = Phase.Scan
    attempts: int = 0
    cursor: int = 0
    pepper: int = 0
    stop: int = 0

    @property
    def terminal(self) -> bool:
        return self.phase in TERMINAL


def _retry_or_give_up(s: HarvestState, ctx: FsmContext) -> HarvestState:
    if s.attempts < ctx.max_attempts and s.cursor + 1 < ctx.n_candidates:
        return replace(s, phase=Phase.PlanAttach, cursor=s.cursor + 1)
    return replace(s, phase=Phase.NextPepper)


def _after_pepper(s: HarvestState, ctx: FsmContext) -> HarvestState:
    nxt = s.pepper + 1
    if nxt < ctx.n_peppers:
        return HarvestState(Phase.SelectPepper, pepper=nxt, stop=s.stop)
    if s.stop < ctx.base_moves:
        return HarvestState(Phase.MoveBase, pepper=nxt, stop=s.stop)
    return HarvestState(Phase.Done, pepper=nxt, stop=s.stop)


def _recoupled(s, ctx):
    if s.pepper + 1 < ctx.n_peppers or s.stop < ctx.base_moves:
        return replace(s, phase=Phase.NextPepper)
    return HarvestState(Phase.Done, pepper=s.pepper + 1, stop=s.stop)


def _select(s, ctx):
    if ctx.n_peppers == 0:
        return _after_pepper(replace(s, pepper=-1), ctx)
    return HarvestState(Phase.SelectPepper, pepper=0, stop=s.stop)


def _plan_attach_failed(s, ctx):
    if ctx.plan_failure_counts:
        s = replace(s, attempts=s.attempts + 1)
    return _retry_or_give_up(s, ctx)


E = SensorEvent
P = Phase

TRANSITIONS = {
    (P.Scan, E.TrajectoryDone): lambda s, c: replace(s, phase=P.Segment),
    (P.Scan, E.PlanFailed): lambda s, c: replace(s, phase=P.Failed),
    (P.Segment, E.TrajectoryDone): _select,
    (P.Segment, E.PlanFailed): lambda s, c: replace(s, phase=P.Failed),
    (P.SelectPepper, E.TrajectoryDone): lambda s, c: (
        replace(s, phase=P.PlanAttach, attempts=0, cursor=0) if c.n_candidates > 0
        else replace(s, phase=P.NextPepper)),
    (P.SelectPepper, E.PlanFailed): lambda s, c: replace(s, phase=P.NextPepper),
    (P.PlanAttach, E.TrajectoryDone): lambda s, c: replace(s, phase=P.ExecuteAttach, attempts=s.attempts + 1),
    (P.PlanAttach, E.PlanFailed): _plan_attach_failed,
    (P.ExecuteAttach, E.PressureAttached): lambda s, c: replace(s, phase=P.Separate),
    (P.ExecuteAttach, E.PressureLost): _retry_or_give_up,
    (P.Separate, E.MicroswitchDecoupled): lambda s, c: replace(s, phase=P.PlanDetach),
    (P.Separate, E.PressureLost): _retry_or_give_up,
    (P.PlanDetach, E.TrajectoryDone): lambda s, c: replace(s, phase=P.ExecuteDetach),
    (P.PlanDetach, E.PlanFailed): lambda s, c: replace(s, phase=P.Release),
    (P.ExecuteDetach, E.TrajectoryDone): lambda s, c: replace(s, phase=P.Release),
    (P.Release, E.TrajectoryDone): lambda s, c: replace(s, phase=P.Recouple),
    (P.Recouple, E.MicroswitchCoupled): _recoupled,
    (P.Recouple, E.MicroswitchDecoupled): lambda s, c: replace(s, phase=P.Failed),
    (P.NextPepper, E.TrajectoryDone): _after_pepper,
    (P.MoveBase, E.TrajectoryDone): lambda s, c: HarvestState(P.Scan, stop=s.stop + 1),
    (P.MoveBase, E.PlanFailed): lambda s, c: replace(s, phase=P.Failed),
}


def fsm_step(state: HarvestState, event: SensorEvent, ctx: FsmContext = FsmContext()) -> HarvestState:
    """Apply one sensor event; raises IllegalTransition for pairs outside the table."""
    try:
        handler = TRANSITIONS[(state.phase, SensorEvent(event))]
    except KeyError:
        raise IllegalTransition(f"{state.phase.value} does not accept {SensorEvent(event).value}") from None
    return handler(state, ctx)


def legal_events(phase: Phase) -> list:
    return [e for e in SensorEvent if (phase, e) in TRANSITIONS]

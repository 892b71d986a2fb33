from .fsm import FsmContext, HarvestState, Phase, SensorEvent, fsm_step, legal_events
from .pipeline import ActionLog, MotionConfig, NullHarvester, ProcessedPepper, run_pipeline
from .trajectories import (
    PlanarObstacle,
    ScanPattern,
    Stage,
    Trajectory,
    attach_trajectory,
    check_collision,
    cut_trajectory,
    scan_waypoints,
    separation_move,
)

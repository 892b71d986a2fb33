from .outcomes import OutcomeModel, simulate_attach, simulate_detach
from .scene import LeafSpec, Obstruction, PepperSpec, SceneSpec, World, easy_scene, generate_scene, hard_scene, make_pepper
from .sensor import RenderStats, VirtualSensor, render_views
from .trial import (
    TrialRecord,
    TrialStats,
    aggregate,
    fixture_text,
    parse_records,
    read_records,
    run_trial,
    run_trials,
    write_records,
)

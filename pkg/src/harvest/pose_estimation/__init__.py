from .poses import (
    CutPose,
    ScoredPose,
    level_orientation,
    read_poses_csv,
    upright_orientation,
    write_poses_csv,
)
from .ranking import (
    DEFAULT_CUT_WEIGHTS,
    DEFAULT_GRASP_WEIGHTS,
    Mode,
    UtilityWeights,
    alignment_score,
    candidate_scores,
    boundary_points,
    estimate_cut_pose,
    score_candidates,
    utility,
)
from .superellipsoid import (
    SuperellipsoidModel,
    cut_from_model,
    fit_superellipsoid,
    grasp_from_model,
    superellipsoid_implicit,
)

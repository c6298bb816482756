"""Two-view relative pose estimation guided by a coarse motion prior."""
from .geometry import CameraIntrinsics, DegenerateError, Pose, pose_error
from .matcher import KeypointSet, MatcherConfig, MatchResult, match
from .prior import FeatureGrid, PriorConfig, coarse_pose_from_map, correlate_grids, noisy_oracle_prior
from .estimator import EstimatorConfig, EstimateResult, estimate_pose
from .simulator import SceneConfig, SyntheticPair, generate_dataset, generate_pair
from .bench import BenchConfig, BenchReport, emit_report, pose_auc, run_benchmark

__all__ = [
    "CameraIntrinsics", "DegenerateError", "Pose", "pose_error",
    "KeypointSet", "MatcherConfig", "MatchResult", "match",
    "FeatureGrid", "PriorConfig", "coarse_pose_from_map", "correlate_grids", "noisy_oracle_prior",
    "EstimatorConfig", "EstimateResult", "estimate_pose",
    "SceneConfig", "SyntheticPair", "generate_dataset", "generate_pair",
    "BenchConfig", "BenchReport", "emit_report", "pose_auc", "run_benchmark",
]

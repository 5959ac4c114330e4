"""Ego-centric sparse interaction and planning over synthetic BEV scenes.

Hot geometry and training kernels come from a compiled extension when it is
available; ``egoplan.kernels.BACKEND`` says which implementation is active.
"""
from .bevgrid import (BevGrid, GridSpec, ReferenceLine, distance_map, extract_reference_line,
                      geo_normalize, response_target, sample_geo_score)
from .denoise import NoiseSpec, diffuse_positions, final_displacement, noise_trajectory
from .evalkit import (ObbPose, aggregate_report, collision_rate_grid, collision_rate_obb, l2_error,
                      obb_overlap, yaw_from_traj)
from .interaction import SelectionSchedule, coarse_to_fine_select, fuse_scores
from .kernels import BACKEND
from .planner import RefineConfig, constraint_cost, iterate_refine, optimize_plan
from .scene import AnchorBox, Command, EgoIntent, Scenario, Trajectory, gen_scenario

__version__ = "0.1.0"

__all__ = [
    "AnchorBox", "BACKEND", "BevGrid", "Command", "EgoIntent", "GridSpec", "NoiseSpec", "ObbPose",
    "ReferenceLine", "RefineConfig", "Scenario", "SelectionSchedule", "Trajectory",
    "aggregate_report", "coarse_to_fine_select", "collision_rate_grid", "collision_rate_obb",
    "constraint_cost", "diffuse_positions", "distance_map", "extract_reference_line",
    "final_displacement", "fuse_scores", "gen_scenario", "geo_normalize", "iterate_refine",
    "l2_error", "noise_trajectory", "obb_overlap", "optimize_plan", "response_target",
    "sample_geo_score", "yaw_from_traj",
]

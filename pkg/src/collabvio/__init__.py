"""Collaborative visual-inertial odometry for small UAV teams.

Each agent runs a sliding-window MSCKF with SLAM features.  Agents exchange
compact place-recognition requests and fuse the returned keyframe snapshots
with covariance intersection.
"""

from .fusion import RemoteSnapshot, ci_ekf_update, ci_weights, collab_msckf_update, match_tracks, slam_slam_update
from .harness import RunConfig, RunReport, compute_ate, compute_nees, run
from .sim import Scenario, builtin_scenario, generate_truth, load_scenario
from .state import AgentState, ImuState, SlidingWindow, initial_state

__version__ = "0.1.0"

__all__ = [
    "AgentState",
    "ImuState",
    "SlidingWindow",
    "initial_state",
    "RemoteSnapshot",
    "ci_weights",
    "ci_ekf_update",
    "collab_msckf_update",
    "slam_slam_update",
    "match_tracks",
    "Scenario",
    "load_scenario",
    "builtin_scenario",
    "generate_truth",
    "RunConfig",
    "RunReport",
    "run",
    "compute_ate",
    "compute_nees",
]

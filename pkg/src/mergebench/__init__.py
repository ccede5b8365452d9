"""On-ramp merging planning workbench.

Three controllers over one deterministic merge simulator: a space-time
lattice speed planner (MPC), a DDPG policy, and a supervisor that blends
them, plus a batch evaluation harness.
"""

from .sim import (AggregateMetrics, EgoLimits, EpisodeMetrics, KraussParams,
                  RoadGeometry, SimConfig, TrafficModel, TRAFFIC_PRESETS,
                  VehicleState, WorldState, check_collision, clip_ego_action,
                  compute_metrics, krauss_step, make_initial_state,
                  run_episode, spawn_traffic, step_episode)
from .prediction import PredictionModel, predict_next, rollout_policy
from .st_solver import (STCostWeights, STLattice, STObstacleSet, STSolver,
                        STTrajectory, lattice_dp, project_obstacles,
                        smooth_trajectory, st_cost, st_solve)

__version__ = "0.1.0"

"""Per-tick arbitration between the learned policy and the speed planner.

At every tick the supervisor rolls the policy forward through the prediction
model; the planner takes over if the predicted trajectory gets too close to
any car, if the planner cannot find a safe continuation from the predicted
terminal state, or if its own trajectory is strictly better (more distance
with less jerk, or the policy's trajectory stalls entirely).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .prediction import PredictionModel, rollout_policy
from .sim import CAR_LENGTH, WorldState, run_episode
from .st_solver import STSolver, STSolveResult

REASON_ROLLOUT_UNSAFE = "rollout_unsafe"
REASON_TERMINAL_INFEASIBLE = "terminal_infeasible"
REASON_RL_MOTIONLESS = "rl_motionless"
REASON_ST_STRICTLY_BETTER = "st_strictly_better"
REASON_RL_OK = "rl_ok"

_ST_REASONS = {REASON_ROLLOUT_UNSAFE, REASON_TERMINAL_INFEASIBLE,
               REASON_RL_MOTIONLESS, REASON_ST_STRICTLY_BETTER}


@dataclass(frozen=True)
class SupervisorConfig:
    rollout_ticks: int = 25
    safety_distance: float = 5.1   # center-to-center veto threshold, meters
    st_horizon: float = 5.0

    def __post_init__(self):
        if self.rollout_ticks < 1:
            raise ValueError("rollout_ticks must be >= 1")
        if self.safety_distance <= 0:
            raise ValueError("safety_distance must be positive")


@dataclass
class Decision:
    chosen: str                     # "st" | "rl"
    reason: str
    min_gap: float = math.inf       # smallest predicted center gap in rollout
    j_st: float = math.nan
    j_rl: float = math.nan
    d_st: float = math.nan
    d_rl: float = math.nan
    st_jerk: float = math.nan       # first-tick command of the chosen branch
    rl_jerk: float = math.nan

    def __post_init__(self):
        if self.reason in _ST_REASONS and self.chosen != "st":
            raise ValueError(f"reason {self.reason} implies the ST controller")

    @property
    def jerk(self) -> float:
        return self.st_jerk if self.chosen == "st" else self.rl_jerk


def _min_center_gap(state: WorldState) -> float:
    """Smallest |ego - car| center distance among cars on the ego's path;
    inf while the ego is still on the disjoint part of the ramp."""
    geo = state.cfg.geometry
    if state.ego_pos <= geo.merge_point_x - CAR_LENGTH:
        return math.inf
    if len(state.traffic_pos) == 0:
        return math.inf
    return float(np.min(np.abs(state.traffic_pos - state.ego_pos)))


def is_unsafe(d_min: float, states) -> bool:
    """True iff in any state the ego is within d_min (center-to-center along
    the path) of a traffic car."""
    for s in states:
        if _min_center_gap(s) < d_min:
            return True
    return False


def mean_abs_jerk(states) -> float:
    """Mean absolute per-tick ego jerk over a predicted segment."""
    if len(states) < 1:
        raise ValueError("need at least one stepped state")
    return float(np.mean([abs(s.ego_jerk) for s in states]))


def ego_distance_traveled(first: WorldState, last: WorldState) -> float:
    return last.ego_pos - first.ego_pos


def _st_states_safe(result: STSolveResult, x_base: WorldState, d_min: float,
                    n_ticks: int) -> bool:
    """Check a planner trajectory against constant-speed traffic from x_base
    with the same center-gap rule as the rollout check."""
    if not result.feasible:
        return False
    geo = x_base.cfg.geometry
    dt = x_base.cfg.tick_length
    s = result.trajectory.s
    for k in range(1, min(len(s), n_ticks + 1)):
        ego = x_base.ego_pos + float(s[k])
        if ego <= geo.merge_point_x - CAR_LENGTH:
            continue
        if len(x_base.traffic_pos) == 0:
            continue
        cars = x_base.traffic_pos + x_base.traffic_speed * (k * dt)
        if float(np.min(np.abs(cars - ego))) < d_min:
            return False
    return True


class Supervisor:
    """Implements the combined decision rule; one instance per episode run."""

    def __init__(self, policy, st: STSolver, cfg: SupervisorConfig | None = None,
                 prediction: PredictionModel | None = None, predict=None):
        self.policy = policy
        self.st = st
        self.cfg = cfg or SupervisorConfig()
        self.prediction = prediction or PredictionModel()
        self.predict = predict  # override hook: true-model substitution

    def choose(self, x0: WorldState) -> Decision:
        cfg = self.cfg
        n = cfg.rollout_ticks
        states, controls = rollout_policy(self.policy, x0, n, self.prediction,
                                          predict=self.predict)
        min_gap = min(_min_center_gap(s) for s in states)
        rl_first = controls[0]

        # predicted proximity veto
        if min_gap < cfg.safety_distance:
            st_res = self.st.solve(x0)
            return Decision("st", REASON_ROLLOUT_UNSAFE, min_gap=min_gap,
                            st_jerk=st_res.first_jerk, rl_jerk=rl_first)

        # terminal feasibility: the planner must find a safe continuation
        # from the predicted end state
        terminal_res = self.st.solve(states[-1])
        if not _st_states_safe(terminal_res, states[-1], cfg.safety_distance,
                               self._horizon_ticks(x0)):
            st_res = self.st.solve(x0)
            return Decision("st", REASON_TERMINAL_INFEASIBLE, min_gap=min_gap,
                            st_jerk=st_res.first_jerk, rl_jerk=rl_first)

        # efficiency comparison over a common horizon
        st_res = self.st.solve(x0)
        k = min(n, self._horizon_ticks(x0))
        j_st = st_res.trajectory.mean_abs_jerk(k)
        j_rl = mean_abs_jerk(states[:k])
        d_st = float(st_res.trajectory.s[min(k, len(st_res.trajectory.s) - 1)])
        d_rl = ego_distance_traveled(x0, states[k - 1])
        common = dict(min_gap=min_gap, j_st=j_st, j_rl=j_rl, d_st=d_st,
                      d_rl=d_rl, st_jerk=st_res.first_jerk, rl_jerk=rl_first)
        if d_rl <= 0.0:
            return Decision("st", REASON_RL_MOTIONLESS, **common)
        if d_rl < d_st and j_rl > j_st:
            return Decision("st", REASON_ST_STRICTLY_BETTER, **common)
        return Decision("rl", REASON_RL_OK, **common)

    def _horizon_ticks(self, state: WorldState) -> int:
        return int(round(self.cfg.st_horizon / state.cfg.tick_length))


def choose_controller(x0: WorldState, policy, cfg: SupervisorConfig,
                      st: STSolver | None = None, predict=None) -> Decision:
    """One arbitration from scratch (convenience wrapper around Supervisor)."""
    sup = Supervisor(policy, st or STSolver(x0.cfg), cfg, predict=predict)
    return sup.choose(x0)


class CombinedController:
    """WorldState -> jerk controller that arbitrates every tick and exposes
    the last Decision for logging."""

    tag = "combined"

    def __init__(self, policy, st: STSolver,
                 cfg: SupervisorConfig | None = None, predict=None):
        self.supervisor = Supervisor(policy, st, cfg, predict=predict)
        self.last_decision: Decision | None = None

    def __call__(self, state: WorldState) -> float:
        d = self.supervisor.choose(state)
        self.last_decision = d
        return d.jerk


def run_combined_episode(state: WorldState, policy, st: STSolver | None = None,
                         cfg: SupervisorConfig | None = None, predict=None,
                         log=None):
    """Drive one episode under supervision; returns (metrics, final state,
    per-tick decisions)."""
    st = st or STSolver(state.cfg)
    controller = CombinedController(policy, st, cfg, predict=predict)
    decisions: list[Decision] = []

    def _log(prev, cmd, nxt):
        decisions.append(controller.last_decision)
        if log is not None:
            log(prev, cmd, nxt, controller.last_decision)

    metrics, final = run_episode(state, controller, log=_log)
    return metrics, final, decisions

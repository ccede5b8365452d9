"""One-step deterministic prediction of the world, and policy rollout through it.

The default model advances every traffic car at its current speed with no
reaction to the ego (deliberately simpler than the true Krauss dynamics) and
integrates the ego's jerk command with the same clipping as the simulator.
Both the speed planner and the supervisor share this model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .sim import WorldState, clip_ego_action

CONSTANT_SPEED = "constant_speed_lane_follow"


@dataclass(frozen=True)
class PredictionModel:
    mode: str = CONSTANT_SPEED
    horizon_ticks: int = 25

    def __post_init__(self):
        if self.mode != CONSTANT_SPEED:
            raise ValueError(f"unknown prediction mode {self.mode!r}")
        if self.horizon_ticks < 1:
            raise ValueError("horizon_ticks must be >= 1")


def predict_next(state: WorldState, ego_jerk: float) -> WorldState:
    """Predicted next state: ego via clipped jerk integration, traffic at
    constant current speed. Pure function of its inputs; never touches the
    rng or the spawn schedule, and leaves the episode status untouched."""
    dt = state.cfg.tick_length
    j_eff, a_new, v_new = clip_ego_action(state.ego_speed, state.ego_accel,
                                          ego_jerk, dt, state.cfg.limits)
    return replace(
        state,
        tick=state.tick + 1,
        sim_time=round((state.tick + 1) * dt, 9),
        ego_pos=state.ego_pos + v_new * dt,
        ego_speed=v_new,
        ego_accel=a_new,
        ego_jerk=j_eff,
        traffic_pos=state.traffic_pos + state.traffic_speed * dt,
        traffic_speed=state.traffic_speed.copy(),
        traffic_accel=np.zeros_like(state.traffic_accel),
    )


def true_model_predictor(state: WorldState, ego_jerk: float) -> WorldState:
    """Perfect prediction: one step of the real simulator on a private copy.

    The rng is duplicated, so the predicted draws replay exactly what the
    live episode will draw, and the live generator is left untouched.
    Terminal predicted states are absorbing so rollouts can run past them.
    """
    from .sim import STATUS_RUNNING, step_episode  # avoids a module cycle
    if state.status != STATUS_RUNNING:
        return state
    return step_episode(state.copy(copy_rng=True), ego_jerk)


def rollout_policy(policy, x0: WorldState, n: int,
                   model: PredictionModel | None = None,
                   predict=None) -> tuple[list[WorldState], list[float]]:
    """Iterate u_{i-1} = policy(x_{i-1}), x_i = f(x_{i-1}, u_{i-1}) for n steps.

    Returns the predicted states x_1..x_n and the commands that produced them.
    `predict` overrides the transition function (used to substitute the true
    simulator step when studying the perfect-model case).
    """
    if n < 1:
        raise ValueError("rollout length must be >= 1")
    step = predict if predict is not None else predict_next
    states: list[WorldState] = []
    controls: list[float] = []
    x = x0
    for _ in range(n):
        u = float(policy(x))
        x = step(x, u)
        states.append(x)
        controls.append(u)
    return states, controls

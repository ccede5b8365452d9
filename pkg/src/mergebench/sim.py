"""Deterministic single-merge traffic simulator.

One-lane on-ramp joining a one-lane highway. Traffic follows the Krauss
car-following model; the ego vehicle is driven by an external controller
through a jerk command each 0.2 s tick. Everything is seeded, so the same
seed and controller reproduce an episode bit for bit.

Coordinates: a single longitudinal axis with the merge point at x = 0 by
default. The ego's arc position along the ramp maps 1:1 onto this axis, so
positions of ramp and highway vehicles are directly comparable. Positions
refer to front bumpers.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

CAR_LENGTH = 5.0

STATUS_RUNNING = "running"
STATUS_MERGED = "merged"
STATUS_CRASHED = "crashed"
STATUS_TIMEOUT = "timeout"


class SimulationError(RuntimeError):
    """Contract violation in the simulation layer (e.g. stepping a finished episode)."""


@dataclass(frozen=True)
class RoadGeometry:
    """Fixed road layout. Distances in meters, merge point at merge_point_x."""

    ramp_length: float = 160.0        # ego start to merge point, along the ramp
    post_merge_distance: float = 50.0  # travel needed past the merge point to finish
    merge_point_x: float = 0.0
    sensor_range: float = 125.0
    ramp_lateral_offset: float = 3.5   # |y| of the ego at the ramp start
    spawn_x: float = -300.0            # highway insertion point
    exit_x: float = 200.0              # vehicles leave the network past this
    merge_zone_length: float = 10.0    # traffic starts yielding to the ego this far out

    def __post_init__(self):
        if self.ramp_length <= 0 or self.post_merge_distance <= 0:
            raise ValueError("ramp_length and post_merge_distance must be positive")
        if self.sensor_range <= 0:
            raise ValueError("sensor_range must be positive")
        if self.spawn_x >= self.merge_point_x - self.ramp_length:
            raise ValueError("spawn_x must lie upstream of the ego start")

    def lateral_offset(self, arc_position: float) -> float:
        """Ego y coordinate: tapers linearly to 0 at the merge point, 0 beyond."""
        d = self.merge_point_x - arc_position
        if d <= 0:
            return 0.0
        return self.ramp_lateral_offset * min(1.0, d / self.ramp_length)

    @property
    def ego_start_x(self) -> float:
        return self.merge_point_x - self.ramp_length

    @property
    def merge_completion_x(self) -> float:
        return self.merge_point_x + self.post_merge_distance


@dataclass(frozen=True)
class EgoLimits:
    speed_range: tuple[float, float] = (0.0, 30.0)
    accel_range: tuple[float, float] = (-6.0, 4.5)
    jerk_range: tuple[float, float] = (-5.0, 5.0)

    def __post_init__(self):
        for lo, hi in (self.speed_range, self.accel_range, self.jerk_range):
            if lo > hi:
                raise ValueError("limit ranges must be ordered min <= max")


@dataclass(frozen=True)
class KraussParams:
    """Car-following parameters. Defaults are common microsimulation values;
    imperfection (sigma) is the random dawdling strength, 0 disables it."""

    reaction_time: float = 1.0
    max_decel: float = 4.5
    max_accel: float = 4.5
    imperfection: float = 0.5

    def __post_init__(self):
        if self.reaction_time <= 0 or self.max_decel <= 0 or self.max_accel <= 0:
            raise ValueError("reaction_time, max_decel, max_accel must be positive")
        if not 0.0 <= self.imperfection <= 1.0:
            raise ValueError("imperfection must be in [0, 1]")


@dataclass(frozen=True)
class TrafficModel:
    """Parametric spawn distribution for one traffic scenario."""

    name: str
    headway_range: tuple[float, float]
    traffic_speed: float
    ego_initial_speed_range: tuple[float, float] = (5.0, 25.0)

    def __post_init__(self):
        lo, hi = self.headway_range
        if not 0 < lo <= hi:
            raise ValueError("headway range must satisfy 0 < min <= max")
        if not 0 < self.traffic_speed <= 30.0:
            raise ValueError("traffic_speed must be in (0, 30]")

    @staticmethod
    def preset(name: str) -> "TrafficModel":
        try:
            return TRAFFIC_PRESETS[name]
        except KeyError:
            raise KeyError(
                f"unknown traffic preset {name!r}; choose from {sorted(TRAFFIC_PRESETS)}"
            ) from None


TRAFFIC_PRESETS = {
    "heavy": TrafficModel("heavy", (1.2, 2.0), 7.0),
    "medium": TrafficModel("medium", (1.8, 2.6), 7.0),
    "low": TrafficModel("low", (2.4, 3.2), 7.0),
    "moderate": TrafficModel("moderate", (1.2, 2.0), 11.0),
    "fast": TrafficModel("fast", (1.2, 2.0), 15.0),
}


@dataclass(frozen=True)
class SimConfig:
    """Everything fixed across an episode: geometry, limits, drivers, clock."""

    geometry: RoadGeometry = field(default_factory=RoadGeometry)
    limits: EgoLimits = field(default_factory=EgoLimits)
    krauss: KraussParams = field(default_factory=KraussParams)
    tick_length: float = 0.2
    timeout: float = 100.0
    traffic_speed_max: float = 30.0


@dataclass
class VehicleState:
    """Snapshot of one vehicle. arc_position is the front bumper."""

    id: int
    arc_position: float
    lane: str  # "ramp" | "highway"
    speed: float
    acceleration: float
    length: float = CAR_LENGTH


@dataclass
class WorldState:
    """Full simulator snapshot.

    Traffic is stored as parallel numpy arrays sorted by position descending
    (front of the stream first); the `traffic` property materializes
    VehicleState objects when object access is preferable to array access.
    """

    cfg: SimConfig
    model: TrafficModel
    sim_time: float
    tick: int
    ego_pos: float
    ego_speed: float
    ego_accel: float
    ego_jerk: float
    status: str
    traffic_id: np.ndarray
    traffic_pos: np.ndarray
    traffic_speed: np.ndarray
    traffic_accel: np.ndarray
    rng: np.random.Generator
    arrival_times: np.ndarray
    arrival_cursor: int
    next_vehicle_id: int
    time_to_merge: float | None = None

    @property
    def tick_length(self) -> float:
        return self.cfg.tick_length

    @property
    def ego_lane(self) -> str:
        return "highway" if self.ego_pos >= self.cfg.geometry.merge_point_x else "ramp"

    @property
    def ego_y(self) -> float:
        return self.cfg.geometry.lateral_offset(self.ego_pos)

    @property
    def ego(self) -> VehicleState:
        return VehicleState(-1, self.ego_pos, self.ego_lane, self.ego_speed,
                            self.ego_accel)

    @property
    def traffic(self) -> list[VehicleState]:
        return [
            VehicleState(int(i), float(p), "highway", float(v), float(a))
            for i, p, v, a in zip(self.traffic_id, self.traffic_pos,
                                  self.traffic_speed, self.traffic_accel)
        ]

    def copy(self, copy_rng: bool = False) -> "WorldState":
        """Cheap value copy; the rng is shared unless copy_rng is set."""
        return replace(
            self,
            traffic_id=self.traffic_id.copy(),
            traffic_pos=self.traffic_pos.copy(),
            traffic_speed=self.traffic_speed.copy(),
            traffic_accel=self.traffic_accel.copy(),
            rng=copy.deepcopy(self.rng) if copy_rng else self.rng,
        )


@dataclass
class EpisodeMetrics:
    outcome: str
    time_to_merge: float | None
    mean_abs_jerk: float
    tick_count: int


@dataclass
class AggregateMetrics:
    """Episode-set summary. Rates are exact rationals of the episode count."""

    episodes: int
    crashes: int
    merges: int
    timeouts: int
    mean_abs_jerk: float
    time_to_merge: float | None
    episodes_csv: str | None = None

    @property
    def crash_rate(self) -> Fraction:
        return Fraction(self.crashes, self.episodes)

    @property
    def merge_rate(self) -> Fraction:
        return Fraction(self.merges, self.episodes)

    @property
    def timeout_rate(self) -> Fraction:
        return Fraction(self.timeouts, self.episodes)


def spawn_traffic(model: TrafficModel, rng: np.random.Generator,
                  cfg: SimConfig | None = None) -> np.ndarray:
    """Arrival schedule for one episode: times at which successive cars reach
    the spawn point, gaps i.i.d. uniform over the model's headway range.

    Times start negative so that the highway is already populated at t = 0
    (a car that "arrived" at t = -a sits v*a meters downstream of the spawn
    point). Every car is inserted at the model's traffic speed.
    """
    cfg = cfg or SimConfig()
    lead_in = (cfg.geometry.exit_x - cfg.geometry.spawn_x) / model.traffic_speed
    horizon = cfg.timeout + 1.0
    lo, hi = model.headway_range
    times = []
    t = -lead_in
    while t <= horizon:
        times.append(t)
        t += rng.uniform(lo, hi)
    return np.asarray(times)


def krauss_step(leader: VehicleState | None, follower: VehicleState, dt: float,
                params: KraussParams, rng: np.random.Generator | None = None,
                v_max: float = 30.0) -> float:
    """One Krauss speed update for `follower` behind `leader` (or free road).

    v_safe = v_l + (gap - v_l*tau) / ((v_l + v_f)/(2b) + tau), with the
    bumper-to-bumper gap; desired speed is the minimum of v_max, v + a*dt and
    v_safe; random dawdling then subtracts up to sigma*a*dt. The result is
    clipped so the implied acceleration stays within [-max_decel_hard, a].
    A non-positive gap means a collision already happened: returns 0.
    """
    v = follower.speed
    if leader is None:
        v_safe = v_max
    else:
        gap = leader.arc_position - leader.length - follower.arc_position
        if gap < 0:
            return 0.0
        vl = leader.speed
        tau = params.reaction_time
        v_safe = vl + (gap - vl * tau) / ((vl + v) / (2.0 * params.max_decel) + tau)
    v_des = min(v_max, v + params.max_accel * dt, v_safe)
    if params.imperfection > 0.0 and rng is not None:
        v_des -= params.imperfection * params.max_accel * dt * rng.uniform()
    v_new = max(0.0, v_des)
    # hard physical acceleration window (shared with the ego's limits)
    a = (v_new - v) / dt
    a = min(max(a, -6.0), 4.5)
    return max(0.0, v + a * dt)


def clip_ego_action(speed: float, accel: float, requested_jerk: float, dt: float,
                    limits: EgoLimits) -> tuple[float, float, float]:
    """Realized (jerk, accel, speed) after applying a jerk command.

    The jerk is clipped to its own range, the resulting acceleration to the
    acceleration range and then to the speed headroom, so the speed never
    leaves [0, 30]. At the speed saturation corner the headroom bound wins
    and the realized jerk can exceed the jerk range; everywhere else the
    realized jerk equals the clipped command.
    """
    j_lo, j_hi = limits.jerk_range
    a_lo, a_hi = limits.accel_range
    v_lo, v_hi = limits.speed_range
    j = min(max(requested_jerk, j_lo), j_hi)
    a_new = min(max(accel + j * dt, a_lo), a_hi)
    a_new = min(max(a_new, (v_lo - speed) / dt), (v_hi - speed) / dt)
    v_new = min(max(speed + a_new * dt, v_lo), v_hi)
    return (a_new - accel) / dt, a_new, v_new


def make_initial_state(model: TrafficModel, cfg: SimConfig | None = None,
                       seed: int | np.random.Generator = 0) -> WorldState:
    """Fresh episode: ego at the ramp start with a random initial speed, the
    highway pre-populated from the arrival schedule's negative-time portion."""
    cfg = cfg or SimConfig()
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.default_rng(seed)
    ego_speed = rng.uniform(*model.ego_initial_speed_range)
    arrivals = spawn_traffic(model, rng, cfg)

    geo = cfg.geometry
    pos, ids = [], []
    cursor = 0
    vid = 0
    for t in arrivals:  # earliest arrival is farthest downstream: already descending
        if t > 0:
            break
        cursor += 1
        x = geo.spawn_x + model.traffic_speed * (-t)
        if x > geo.exit_x:
            continue
        pos.append(x)
        ids.append(vid)
        vid += 1
    pos = np.asarray(pos)
    ids = np.asarray(ids, dtype=np.int64)

    return WorldState(
        cfg=cfg, model=model, sim_time=0.0, tick=0,
        ego_pos=geo.ego_start_x, ego_speed=ego_speed, ego_accel=0.0,
        ego_jerk=0.0, status=STATUS_RUNNING,
        traffic_id=ids, traffic_pos=pos,
        traffic_speed=np.full(len(pos), model.traffic_speed),
        traffic_accel=np.zeros(len(pos)),
        rng=rng, arrival_times=arrivals, arrival_cursor=cursor,
        next_vehicle_id=vid,
    )


def check_collision(state: WorldState) -> bool:
    """Ego bumper interval overlaps any traffic car, projected on the highway
    axis. Only possible once the ego is within one car length of the merge
    point; before that the ramp and highway are disjoint paths."""
    geo = state.cfg.geometry
    if state.ego_pos <= geo.merge_point_x - CAR_LENGTH:
        return False
    if len(state.traffic_pos) == 0:
        return False
    d = np.abs(state.traffic_pos - state.ego_pos)
    return bool(np.any(d < CAR_LENGTH))


def _ego_couples(ego_pos: float, geo: RoadGeometry) -> bool:
    return ego_pos >= geo.merge_point_x - geo.merge_zone_length


def step_episode(state: WorldState, ego_jerk: float) -> WorldState:
    """Advance the world by one tick under the given ego jerk command.

    All vehicles update synchronously from the previous snapshot. A traffic
    car treats the ego as its leader once the ego has entered the merge zone
    and its projected highway position is ahead of the car.
    """
    if state.status != STATUS_RUNNING:
        raise SimulationError(f"cannot step a {state.status} episode")
    cfg = state.cfg
    geo = cfg.geometry
    dt = cfg.tick_length
    krauss = cfg.krauss

    j_eff, a_new, v_new = clip_ego_action(state.ego_speed, state.ego_accel,
                                          ego_jerk, dt, cfg.limits)
    ego_pos = state.ego_pos + v_new * dt

    n = len(state.traffic_pos)
    pos = state.traffic_pos
    spd = state.traffic_speed
    new_spd = np.empty(n)
    couple = _ego_couples(state.ego_pos, geo)
    noise = state.rng.random(n) if krauss.imperfection > 0.0 and n > 0 else None
    tau = krauss.reaction_time
    b2 = 2.0 * krauss.max_decel
    vmax = cfg.traffic_speed_max
    for i in range(n):
        v = spd[i]
        # nearest leader: the car ahead in the stream, or the ego once coupled
        lead_pos = pos[i - 1] if i > 0 else math.inf
        lead_v = spd[i - 1] if i > 0 else 0.0
        if couple and state.ego_pos > pos[i] and state.ego_pos < lead_pos:
            lead_pos, lead_v = state.ego_pos, state.ego_speed
        if math.isinf(lead_pos):
            v_safe = vmax
        else:
            gap = lead_pos - CAR_LENGTH - pos[i]
            if gap < 0:
                new_spd[i] = 0.0
                continue
            v_safe = lead_v + (gap - lead_v * tau) / ((lead_v + v) / b2 + tau)
        v_des = min(vmax, v + krauss.max_accel * dt, v_safe)
        if noise is not None:
            v_des -= krauss.imperfection * krauss.max_accel * dt * noise[i]
        vn = max(0.0, v_des)
        a = min(max((vn - v) / dt, -6.0), 4.5)
        new_spd[i] = max(0.0, v + a * dt)

    new_pos = pos + new_spd * dt
    new_acc = (new_spd - spd) / dt if n else state.traffic_accel
    ids = state.traffic_id

    # retire cars whose rear bumper has left the network
    keep = new_pos - CAR_LENGTH <= geo.exit_x
    if not keep.all():
        new_pos, new_spd, new_acc, ids = (new_pos[keep], new_spd[keep],
                                          new_acc[keep], ids[keep])

    tick = state.tick + 1
    sim_time = round(tick * dt, 9)

    # scheduled insertions at the spawn point, deferred while there is no room
    cursor = state.arrival_cursor
    vid = state.next_vehicle_id
    while cursor < len(state.arrival_times) and state.arrival_times[cursor] <= sim_time:
        rear = new_pos[-1] if len(new_pos) else math.inf
        if rear - CAR_LENGTH - geo.spawn_x <= 0:
            break
        new_pos = np.append(new_pos, geo.spawn_x)
        new_spd = np.append(new_spd, state.model.traffic_speed)
        new_acc = np.append(new_acc, 0.0)
        ids = np.append(ids, vid)
        vid += 1
        cursor += 1

    nxt = WorldState(
        cfg=cfg, model=state.model, sim_time=sim_time, tick=tick,
        ego_pos=ego_pos, ego_speed=v_new, ego_accel=a_new, ego_jerk=j_eff,
        status=STATUS_RUNNING,
        traffic_id=ids, traffic_pos=new_pos, traffic_speed=new_spd,
        traffic_accel=new_acc, rng=state.rng,
        arrival_times=state.arrival_times, arrival_cursor=cursor,
        next_vehicle_id=vid, time_to_merge=state.time_to_merge,
    )

    if check_collision(nxt):
        nxt.status = STATUS_CRASHED
    elif nxt.ego_pos >= geo.merge_completion_x:
        nxt.status = STATUS_MERGED
        nxt.time_to_merge = sim_time
    elif sim_time >= cfg.timeout:
        nxt.status = STATUS_TIMEOUT
    return nxt


def run_episode(state: WorldState, controller, log=None,
                max_ticks: int | None = None) -> tuple[EpisodeMetrics, WorldState]:
    """Drive an episode to termination. `controller` maps WorldState to a jerk
    command; `log`, when given, is called as log(prev_state, command, new_state)
    after every tick."""
    jerk_abs = 0.0
    ticks = 0
    while state.status == STATUS_RUNNING:
        cmd = controller(state)
        nxt = step_episode(state, cmd)
        jerk_abs += abs(nxt.ego_jerk)
        ticks += 1
        if log is not None:
            log(state, cmd, nxt)
        state = nxt
        if max_ticks is not None and ticks >= max_ticks:
            break
    metrics = EpisodeMetrics(
        outcome=state.status,
        time_to_merge=state.time_to_merge,
        mean_abs_jerk=jerk_abs / ticks if ticks else 0.0,
        tick_count=ticks,
    )
    return metrics, state


def compute_metrics(episodes: list[EpisodeMetrics]) -> AggregateMetrics:
    """Aggregate per-episode results; time to merge averages merged episodes only."""
    if not episodes:
        raise ValueError("compute_metrics needs at least one episode")
    crashes = sum(1 for e in episodes if e.outcome == STATUS_CRASHED)
    merges = sum(1 for e in episodes if e.outcome == STATUS_MERGED)
    timeouts = sum(1 for e in episodes if e.outcome == STATUS_TIMEOUT)
    merge_times = [e.time_to_merge for e in episodes if e.outcome == STATUS_MERGED]
    return AggregateMetrics(
        episodes=len(episodes),
        crashes=crashes,
        merges=merges,
        timeouts=timeouts,
        mean_abs_jerk=float(np.mean([e.mean_abs_jerk for e in episodes])),
        time_to_merge=float(np.mean(merge_times)) if merge_times else None,
    )

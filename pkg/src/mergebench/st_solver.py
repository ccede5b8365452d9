"""Space-time speed planner (the MPC controller).

Pipeline per planning cycle: predict every nearby car forward at constant
speed, project the predictions into S-T space as blocked distance intervals,
run dynamic programming over a (time, distance, speed) lattice for the
minimum-cost collision-free profile, then smooth that profile to simulator
resolution with a small quadratic program.

The DP node is (time column, s level, incoming speed bucket change), which
makes acceleration exact per edge and jerk exact per edge pair, so the DP is
an exact minimizer of its discrete cost over lattice paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .prediction import PredictionModel
from .sim import (CAR_LENGTH, EgoLimits, SimConfig, WorldState,
                  clip_ego_action)

INF = 1e30


@dataclass(frozen=True)
class STCostWeights:
    """Weights of the planning cost functional (defaults reproduce the
    evaluation configuration)."""

    w_unsafe: float = 1e7        # inside the unsafe clearance threshold
    w_clearance: float = 10.0    # 1/d penalty for being near an obstacle
    w_speed: float = 0.5         # (s' - v*)^2
    w_accel: float = 10.0        # (s'')^2
    w_jerk: float = 10.0         # (s''')^2
    desired_speed: float = 30.0
    unsafe_distance: float = 5.0  # clearance threshold d_c, meters
    horizon: float = 5.0          # seconds

    def __post_init__(self):
        if min(self.w_unsafe, self.w_clearance, self.w_speed, self.w_accel,
               self.w_jerk) < 0:
            raise ValueError("weights must be nonnegative")
        if self.unsafe_distance <= 0 or self.horizon <= 0:
            raise ValueError("unsafe_distance and horizon must be positive")


@dataclass(frozen=True)
class STLattice:
    """Discretization of the S-T plane plus speed buckets per node."""

    dt: float = 0.3
    ds: float = 0.05
    horizon_t: float = 5.0
    horizon_s: float = 150.0
    speed_buckets: int = 31
    speed_max: float = 30.0

    def __post_init__(self):
        if self.dt <= 0 or self.ds <= 0:
            raise ValueError("dt and ds must be positive")
        if self.speed_buckets < 2:
            raise ValueError("need at least two speed buckets")
        q = self.stride / self.ds
        if abs(q - round(q)) > 1e-9 or round(q) < 1:
            raise ValueError(
                "bucket_step*dt/2 must be a positive integer multiple of ds "
                "so lattice transitions land on grid points")

    @property
    def bucket_step(self) -> float:
        return self.speed_max / (self.speed_buckets - 1)

    @property
    def stride(self) -> float:
        """Grid pitch actually reachable by transitions (trapezoidal advance)."""
        return self.bucket_step * self.dt / 2.0

    @property
    def n_cols(self) -> int:
        return int(math.floor(self.horizon_t / self.dt + 1e-9)) + 1

    @property
    def n_s(self) -> int:
        """S levels of the reachable sub-grid used by the DP."""
        return int(math.floor(self.horizon_s / self.stride + 1e-9)) + 1

    @property
    def node_count(self) -> int:
        return self.n_cols * (int(math.floor(self.horizon_s / self.ds + 1e-9)) + 1)

    def accel_deltas(self, limits: EgoLimits) -> tuple[int, int]:
        """Allowed per-column speed-bucket changes under the acceleration range."""
        a_lo, a_hi = limits.accel_range
        d_lo = math.ceil(a_lo * self.dt / self.bucket_step - 1e-9)
        d_hi = math.floor(a_hi * self.dt / self.bucket_step + 1e-9)
        if d_lo > 0 or d_hi < 0:
            raise ValueError("acceleration range excludes steady speed")
        return d_lo, d_hi


@dataclass
class STObstacleSet:
    """Predicted obstacle bands in S-T space.

    Each car contributes, at time t, the blocked interval
    (p + v*t - car_length, p + v*t + ego_length) of ego path positions whose
    occupancy would overlap the car; `gate` clips the bands to the part of
    the path shared with the highway (no collision is possible before it).
    """

    rel_pos: np.ndarray      # car front bumper minus ego front bumper at t=0
    speed: np.ndarray
    gate: float
    horizon_s: float

    def intervals(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Blocked [lo, hi] intervals at time t (possibly empty arrays)."""
        if len(self.rel_pos) == 0:
            return np.empty(0), np.empty(0)
        p = self.rel_pos + self.speed * t
        lo = np.maximum(p - CAR_LENGTH, self.gate)
        hi = p + CAR_LENGTH
        ok = (hi > self.gate) & (lo <= self.horizon_s)
        return lo[ok], hi[ok]

    def distance(self, t: float, s) -> np.ndarray | float:
        """Clearance from s to the nearest blocked interval at time t
        (0 inside an interval, inf when no interval exists)."""
        lo, hi = self.intervals(t)
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        if len(lo) == 0:
            d = np.full(s_arr.shape, np.inf)
        else:
            below = lo[None, :] - s_arr[:, None]
            above = s_arr[:, None] - hi[None, :]
            d = np.min(np.maximum(np.maximum(below, above), 0.0), axis=1)
        return d if np.ndim(s) else float(d[0])

    def blocked(self, t: float, s) -> np.ndarray | bool:
        """Strictly inside some blocked interval at time t."""
        lo, hi = self.intervals(t)
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        if len(lo) == 0:
            b = np.zeros(s_arr.shape, dtype=bool)
        else:
            b = np.any((s_arr[:, None] > lo[None, :]) &
                       (s_arr[:, None] < hi[None, :]), axis=1)
        return b if np.ndim(s) else bool(b[0])


@dataclass
class STTrajectory:
    """Sampled ego path positions s(t) at fixed resolution, starting at s=0."""

    dt: float
    s: np.ndarray
    cost: float = 0.0
    feasible: bool = True
    fallback: bool = False

    @property
    def speed(self) -> np.ndarray:
        return np.diff(self.s) / self.dt

    @property
    def accel(self) -> np.ndarray:
        return np.diff(self.s, 2) / self.dt**2

    @property
    def jerk(self) -> np.ndarray:
        return np.diff(self.s, 3) / self.dt**3

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.s)) * self.dt

    @property
    def distance(self) -> float:
        return float(self.s[-1] - self.s[0])

    def mean_abs_jerk(self, k: int | None = None) -> float:
        j = self.jerk if k is None else self.jerk[:max(k - 2, 1)]
        return float(np.mean(np.abs(j))) if len(j) else 0.0


def project_obstacles(state: WorldState, fhat: PredictionModel | None = None,
                      lattice: STLattice | None = None) -> STObstacleSet:
    """Project every sensed car's predicted trajectory onto the ego path.

    With the constant-speed prediction model the projection is analytic:
    bands move linearly in S-T space. Bands are clipped at the point where
    the highway joins the ego path (one car length before the merge point).
    """
    if fhat is not None and fhat.mode != "constant_speed_lane_follow":
        raise ValueError("only the constant-speed prediction model is supported")
    lattice = lattice or STLattice()
    geo = state.cfg.geometry
    gate = (geo.merge_point_x - CAR_LENGTH) - state.ego_pos
    rel = state.traffic_pos - state.ego_pos
    sensed = np.abs(rel) <= geo.sensor_range
    return STObstacleSet(
        rel_pos=rel[sensed],
        speed=state.traffic_speed[sensed],
        gate=gate,
        horizon_s=lattice.horizon_s,
    )


def st_cost(traj: STTrajectory, obstacles: STObstacleSet,
            weights: STCostWeights) -> float:
    """Discrete-sum approximation of the planning cost functional.

    The obstacle integrand is evaluated at every sample; speed, acceleration
    and jerk come from finite differences and each term carries a dt weight.
    """
    w = weights
    dt = traj.dt
    total = 0.0
    for k, s_k in enumerate(traj.s):
        d = obstacles.distance(k * dt, float(s_k))
        if d < w.unsafe_distance:
            total += w.w_unsafe * dt
        elif math.isfinite(d):
            total += w.w_clearance / d * dt
    total += float(np.sum(w.w_speed * (traj.speed - w.desired_speed) ** 2)) * dt
    total += float(np.sum(w.w_accel * traj.accel ** 2)) * dt
    total += float(np.sum(w.w_jerk * traj.jerk ** 2)) * dt
    return total


@njit(cache=True)
def _dp_kernel(n_cols, n_s, n_v, d_lo, d_hi, v0, d0i, edge_base, jerk_cost,
               obs_cost, blocked, start_cost):
    """Forward DP over states (s level, speed bucket, incoming bucket change).

    Deterministic: fixed iteration order, strict-improvement updates, and
    terminal tie-breaking toward larger s then larger speed.
    Returns (best cost, terminal s, v, d indices, backpointer table).
    """
    D = d_hi - d_lo + 1
    prev = np.full((n_v, D, n_s), INF)
    cur = np.full((n_v, D, n_s), INF)
    bp = np.full((n_cols, n_v, D, n_s), -1, dtype=np.int8)
    prev[v0, d0i, 0] = start_cost
    reach = 0
    vlo = v0
    vhi = v0
    for c in range(1, n_cols):
        cur[:, :, :] = INF
        obs_c = obs_cost[c]
        blk_c = blocked[c]
        nvlo = max(0, vlo + d_lo)
        nvhi = min(n_v - 1, vhi + d_hi)
        for v in range(nvlo, nvhi + 1):
            for di in range(D):
                vp = v - (di + d_lo)
                if vp < vlo or vp > vhi:
                    continue
                shift = v + vp
                base = edge_base[v, di]
                smax = min(reach, n_s - 1 - shift)
                crow = cur[v, di]
                bprow = bp[c, v, di]
                for dpi in range(D):
                    ec = base + jerk_cost[di, dpi]
                    prow = prev[vp, dpi]
                    for s in range(smax + 1):
                        pc = prow[s]
                        if pc >= INF:
                            continue
                        s2 = s + shift
                        if blk_c[s2]:
                            continue
                        tot = pc + ec + obs_c[s2]
                        if tot < crow[s2]:
                            crow[s2] = tot
                            bprow[s2] = dpi
        prev, cur = cur, prev
        reach = min(n_s - 1, reach + 2 * (n_v - 1))
        vlo, vhi = nvlo, nvhi
    best = INF
    bs = -1
    bv = -1
    bd = -1
    for s in range(n_s - 1, -1, -1):
        for v in range(n_v - 1, -1, -1):
            for di in range(D - 1, -1, -1):
                c = prev[v, di, s]
                if c < best:
                    best = c
                    bs, bv, bd = s, v, di
    return best, bs, bv, bd, bp


def _obstacle_grid(obstacles: STObstacleSet, lattice: STLattice,
                   weights: STCostWeights) -> tuple[np.ndarray, np.ndarray]:
    """Per-column obstacle cost and blocked mask over the DP sub-grid."""
    n_cols, n_s = lattice.n_cols, lattice.n_s
    stride = lattice.stride
    grid = np.arange(n_s) * stride
    obs_cost = np.zeros((n_cols, n_s))
    blocked = np.zeros((n_cols, n_s), dtype=np.bool_)
    for c in range(n_cols):
        t = c * lattice.dt
        lo, hi = obstacles.intervals(t)
        if len(lo) == 0:
            continue
        below = lo[None, :] - grid[:, None]
        above = grid[:, None] - hi[None, :]
        d = np.min(np.maximum(np.maximum(below, above), 0.0), axis=1)
        obs_cost[c] = np.where(d < weights.unsafe_distance,
                               weights.w_unsafe,
                               weights.w_clearance / np.maximum(d, 1e-12))
        obs_cost[c] *= lattice.dt
        blocked[c] = np.any((grid[:, None] > lo[None, :]) &
                            (grid[:, None] < hi[None, :]), axis=1)
    return obs_cost, blocked


def lattice_dp(start_speed: float, start_accel: float,
               obstacles: STObstacleSet, weights: STCostWeights,
               lattice: STLattice | None = None,
               limits: EgoLimits | None = None) -> STTrajectory:
    """Minimum-cost collision-free lattice trajectory from the ego's state.

    Edge cost uses the planning integrand with the edge's arrival-bucket
    speed, bucket-to-bucket acceleration, and jerk from consecutive bucket
    changes; the obstacle integrand is charged at each visited node. Returns
    a trajectory flagged infeasible when no collision-free path reaches the
    final column.
    """
    lattice = lattice or STLattice()
    limits = limits or EgoLimits()
    w = weights
    d_lo, d_hi = lattice.accel_deltas(limits)
    D = d_hi - d_lo + 1
    n_v = lattice.speed_buckets
    step = lattice.bucket_step
    dt = lattice.dt

    v0 = int(round(start_speed / step))
    v0 = min(max(v0, 0), n_v - 1)
    d0 = int(round(start_accel * dt / step))
    d0 = min(max(d0, d_lo), d_hi)

    deltas = np.arange(d_lo, d_hi + 1)
    speeds = np.arange(n_v) * step
    accels = deltas * step / dt
    edge_base = (w.w_speed * (speeds[:, None] - w.desired_speed) ** 2
                 + w.w_accel * accels[None, :] ** 2) * dt
    jerks = (deltas[:, None] - deltas[None, :]) * step / dt**2
    jerk_cost = w.w_jerk * jerks**2 * dt

    obs_cost, blocked = _obstacle_grid(obstacles, lattice, w)
    if blocked[0, 0]:
        return STTrajectory(dt=dt, s=np.zeros(lattice.n_cols), cost=float("inf"),
                            feasible=False)
    start_cost = float(obs_cost[0, 0])

    best, bs, bv, bd, bp = _dp_kernel(
        lattice.n_cols, lattice.n_s, n_v, d_lo, d_hi, v0, d0 - d_lo,
        edge_base, jerk_cost, obs_cost, blocked, start_cost)

    if best >= INF:
        return STTrajectory(dt=dt, s=np.zeros(lattice.n_cols), cost=float("inf"),
                            feasible=False)

    # walk backpointers to recover the s profile
    n_cols = lattice.n_cols
    s_units = np.empty(n_cols, dtype=np.int64)
    s_idx, v, di = bs, bv, bd
    for c in range(n_cols - 1, 0, -1):
        s_units[c] = s_idx
        dpi = int(bp[c, v, di, s_idx])
        vp = v - (di + d_lo)
        s_idx = s_idx - (v + vp)
        v, di = vp, dpi
    s_units[0] = s_idx
    return STTrajectory(dt=dt, s=s_units * lattice.stride, cost=float(best),
                        feasible=True)


def _clip_integrate(ref: np.ndarray, h: float, v0: float, a0: float,
                    limits: EgoLimits) -> np.ndarray:
    """Track a reference profile with the ego's clipping rules (fallback path).

    Damped gains keep the double integrator from chattering at the jerk limit."""
    out = np.empty_like(ref)
    out[0] = ref[0]
    v, a = v0, a0
    for k in range(1, len(ref)):
        v_des = (ref[min(k + 1, len(ref) - 1)] - out[k - 1]) / (2.0 * h)
        a_des = 0.5 * (v_des - v) / h
        j_des = 0.5 * (a_des - a) / h
        _, a, v = clip_ego_action(v, a, j_des, h, limits)
        out[k] = out[k - 1] + v * h
    return out


class _QPSmoother:
    """Quadratic-program smoothing of a lattice profile to tick resolution.

    Minimizes the summed squared acceleration and jerk of the resampled
    profile subject to a corridor around the lattice path, the start pinned
    to the ego's actual position/speed/acceleration, and box limits on
    speed, acceleration and jerk.
    """

    def __init__(self, limits: EgoLimits, out_dt: float = 0.2,
                 horizon: float = 5.0, corridor_half_width: float = 0.5):
        from cvxopt import matrix, solvers  # deferred: heavy import
        self._matrix = matrix
        self._solvers = solvers
        self.limits = limits
        self.h = out_dt
        self.n = int(math.floor(horizon / out_dt + 1e-9)) + 1
        self.corridor = corridor_half_width
        n, h = self.n, self.h
        e = np.eye(n)
        self.D1 = e[1:] - e[:-1]
        self.D2 = e[2:] - 2 * e[1:-1] + e[:-2]
        self.D3 = e[3:] - 3 * e[2:-1] + 3 * e[1:-2] - e[:-3]
        self.P = 2.0 * (self.D2.T @ self.D2 / h**4 + self.D3.T @ self.D3 / h**6)
        self.q = np.zeros(n)
        lo_a, hi_a = limits.accel_range
        lo_j, hi_j = limits.jerk_range
        lo_v, hi_v = limits.speed_range
        self.G_fixed = np.vstack([self.D1, -self.D1, self.D2, -self.D2,
                                  self.D3, -self.D3])
        self.h_fixed = np.concatenate([
            np.full(n - 1, hi_v * h), np.full(n - 1, -lo_v * h),
            np.full(n - 2, hi_a * h * h), np.full(n - 2, -lo_a * h * h),
            np.full(n - 3, hi_j * h**3), np.full(n - 3, -lo_j * h**3)])
        # the first three samples are pinned by the start state; eliminating
        # them leaves a positive-definite Hessian on the free samples
        self.P_free = self.P[3:, 3:]
        self.P_cross = self.P[3:, :3]
        self.G_free = self.G_fixed[:, 3:]
        self.G_pin = self.G_fixed[:, :3]
        self.opts = {"show_progress": False, "abstol": 1e-10, "reltol": 1e-9,
                     "feastol": 1e-9, "maxiters": 100}

    def reference(self, lattice_traj: STTrajectory) -> np.ndarray:
        """Lattice profile resampled on the output grid, extrapolated at the
        final lattice speed if the output horizon extends past it."""
        t_out = np.arange(self.n) * self.h
        t_lat = lattice_traj.times
        ref = np.interp(t_out, t_lat, lattice_traj.s)
        past = t_out > t_lat[-1]
        if past.any():
            v_end = (lattice_traj.s[-1] - lattice_traj.s[-2]) / lattice_traj.dt
            ref[past] = lattice_traj.s[-1] + v_end * (t_out[past] - t_lat[-1])
        return ref

    def solve(self, lattice_traj: STTrajectory, v0: float, a0: float
              ) -> STTrajectory:
        ref = self.reference(lattice_traj)
        h = self.h
        pinned = np.array([0.0, h * v0, 2 * h * v0 + h * h * a0])
        for width in (self.corridor, 2.0 * self.corridor):
            x = self._try_qp(ref, pinned, width)
            if x is not None:
                return STTrajectory(dt=h, s=x, cost=lattice_traj.cost,
                                    feasible=True)
        clipped = _clip_integrate(ref, h, v0, a0, self.limits)
        return STTrajectory(dt=h, s=clipped, cost=lattice_traj.cost,
                            feasible=True, fallback=True)

    def _try_qp(self, ref, pinned, width) -> np.ndarray | None:
        nf = self.n - 3
        G = np.vstack([self.G_free, np.eye(nf), -np.eye(nf)])
        hv = np.concatenate([self.h_fixed - self.G_pin @ pinned,
                             ref[3:] + width, -(ref[3:] - width)])
        q = self.P_cross @ pinned
        m = self._matrix
        try:
            sol = self._solvers.qp(m(self.P_free), m(q), m(G), m(hv),
                                   options=self.opts)
        except (ValueError, ArithmeticError, ZeroDivisionError):
            return None
        if sol["status"] != "optimal":
            return None
        z = np.asarray(sol["x"]).ravel()
        if (G @ z - hv).max() > 1e-6:
            return None
        return np.concatenate([pinned, z])


def smooth_trajectory(lattice_traj: STTrajectory, limits: EgoLimits,
                      start_speed: float | None = None,
                      start_accel: float | None = None,
                      out_dt: float = 0.2, horizon: float = 5.0,
                      corridor_half_width: float = 0.5) -> STTrajectory:
    """Closest smooth, kinematically feasible trajectory at tick resolution.

    Infeasible corridors are widened once by 2x; if that also fails, the
    linearly interpolated lattice path is tracked under the clipping rules
    and the result is flagged as a fallback.
    """
    if start_speed is None:
        start_speed = float(lattice_traj.speed[0])
    if start_accel is None:
        start_accel = float(lattice_traj.accel[0]) if len(lattice_traj.s) > 2 else 0.0
    sm = _QPSmoother(limits, out_dt, horizon, corridor_half_width)
    return sm.solve(lattice_traj, start_speed, start_accel)


@dataclass
class STSolveResult:
    trajectory: STTrajectory          # tick resolution
    lattice_trajectory: STTrajectory  # DP resolution
    obstacles: STObstacleSet
    first_jerk: float
    feasible: bool

    @property
    def fallback(self) -> bool:
        return self.trajectory.fallback or not self.feasible


class STSolver:
    """Receding-horizon controller: replans from scratch every tick.

    Callable on a WorldState, returning the first-tick jerk command. When the
    lattice search finds no collision-free path the command falls back to
    maximal braking and the result is flagged infeasible.
    """

    tag = "st"

    def __init__(self, cfg: SimConfig | None = None,
                 weights: STCostWeights | None = None,
                 lattice: STLattice | None = None,
                 corridor_half_width: float = 0.5,
                 prediction: PredictionModel | None = None):
        self.cfg = cfg or SimConfig()
        self.weights = weights or STCostWeights()
        self.lattice = lattice or STLattice()
        self.prediction = prediction or PredictionModel()
        self._smoother = _QPSmoother(self.cfg.limits, self.cfg.tick_length,
                                     self.weights.horizon, corridor_half_width)

    def solve(self, state: WorldState) -> STSolveResult:
        obstacles = project_obstacles(state, self.prediction, self.lattice)
        lat = lattice_dp(state.ego_speed, state.ego_accel, obstacles,
                         self.weights, self.lattice, self.cfg.limits)
        if not lat.feasible:
            brake = self._max_brake_profile(state)
            j_eff, _, _ = clip_ego_action(state.ego_speed, state.ego_accel,
                                          self.cfg.limits.jerk_range[0],
                                          self.cfg.tick_length, self.cfg.limits)
            return STSolveResult(brake, lat, obstacles, first_jerk=j_eff,
                                 feasible=False)
        smooth = self._smoother.solve(lat, state.ego_speed, state.ego_accel)
        j_cmd = float(smooth.jerk[0])
        j_eff, _, _ = clip_ego_action(state.ego_speed, state.ego_accel, j_cmd,
                                      self.cfg.tick_length, self.cfg.limits)
        return STSolveResult(smooth, lat, obstacles, first_jerk=j_eff,
                             feasible=True)

    def _max_brake_profile(self, state: WorldState) -> STTrajectory:
        h = self.cfg.tick_length
        n = self._smoother.n
        j_brake = self.cfg.limits.jerk_range[0]
        s = np.zeros(n)
        v, a = state.ego_speed, state.ego_accel
        for k in range(1, n):
            _, a, v = clip_ego_action(v, a, j_brake, h, self.cfg.limits)
            s[k] = s[k - 1] + v * h
        return STTrajectory(dt=h, s=s, cost=float("inf"), feasible=False,
                            fallback=True)

    def __call__(self, state: WorldState) -> float:
        return self.solve(state).first_jerk


def st_solve(state: WorldState, solver: STSolver | None = None) -> tuple[STTrajectory, float]:
    """One planning cycle: (smoothed trajectory, first-tick jerk command)."""
    solver = solver or STSolver(state.cfg)
    res = solver.solve(state)
    return res.trajectory, res.first_jerk

"""DDPG agent: observation encoding, reward, actor/critic MLPs with manual
backpropagation, replay buffer, target networks, training loop and checkpoints.

Networks are plain numpy (float64). The actor maps the 20-component
observation through 400- and 300-unit rectified layers to one output,
squashed to the jerk range; the critic takes observation plus action and is
linear at the output. All gradients are exact analytic backprop, verified
against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .sim import (STATUS_CRASHED, STATUS_MERGED, STATUS_RUNNING, SimConfig,
                  TrafficModel, WorldState, compute_metrics, make_initial_state,
                  run_episode, step_episode)

OBS_DIM = 20
JERK_LIMIT = 5.0

CHECKPOINT_MAGIC = b"MERGEBENCH-DDPG\n"
CHECKPOINT_VERSION = 1
DELTA_SPEED_CONVENTION = "other_minus_ego"

# fixed affine scaling applied before the networks: positions /100,
# speeds /30, accelerations /6, presence flags unscaled
_BLOCK_SCALE = [1 / 100.0, 1 / 30.0, 1 / 6.0, 1.0]
DEFAULT_OBS_SCALE = np.array(
    [1 / 100.0, 1 / 100.0, 1 / 30.0, 1 / 6.0] + _BLOCK_SCALE * 4)
ACTION_SCALE = 1.0 / JERK_LIMIT


class CheckpointError(RuntimeError):
    """Unreadable or incompatible policy checkpoint."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered during training."""


@dataclass(frozen=True)
class RewardWeights:
    success: float = 10.0   # sign-flipped on crash
    time: float = 0.02      # constant per-step penalty
    jerk: float = 0.02      # action-squared penalty

    def __post_init__(self):
        if min(self.success, self.time, self.jerk) < 0:
            raise ValueError("reward weights must be nonnegative")


def reward(u: float, outcome: str, weights: RewardWeights | None = None) -> float:
    """Per-step reward: success term minus time and jerk penalties.

    `outcome` is the episode status produced by the step: merged counts +1,
    crashed counts -1, anything else 0.
    """
    w = weights or RewardWeights()
    if outcome == STATUS_MERGED:
        s = 1.0
    elif outcome == STATUS_CRASHED:
        s = -1.0
    else:
        s = 0.0
    return w.success * s - w.time - w.jerk * u * u


def encode_observation(state: WorldState) -> np.ndarray:
    """20-component observation: ego kinematics, then one 4-component block
    for each of the two nearest cars ahead and behind within sensor range.

    Blocks are [delta x, delta speed (other minus ego), acceleration,
    presence]; absent slots are all-zero. Ahead means a larger highway-axis
    coordinate than the ego.
    """
    obs = np.zeros(OBS_DIM)
    obs[0] = state.ego_pos
    obs[1] = state.ego_y
    obs[2] = state.ego_speed
    obs[3] = state.ego_accel
    dx = state.traffic_pos - state.ego_pos
    sensed = np.abs(dx) <= state.cfg.geometry.sensor_range
    dx = dx[sensed]
    dv = state.traffic_speed[sensed] - state.ego_speed
    da = state.traffic_accel[sensed]
    ahead = np.flatnonzero(dx > 0)
    behind = np.flatnonzero(dx <= 0)
    ahead = ahead[np.argsort(dx[ahead], kind="stable")][:2]
    behind = behind[np.argsort(-dx[behind], kind="stable")][:2]
    slots = [ahead[0] if len(ahead) > 0 else None,
             ahead[1] if len(ahead) > 1 else None,
             behind[0] if len(behind) > 0 else None,
             behind[1] if len(behind) > 1 else None]
    for k, idx in enumerate(slots):
        if idx is None:
            continue
        base = 4 + 4 * k
        obs[base] = dx[idx]
        obs[base + 1] = dv[idx]
        obs[base + 2] = da[idx]
        obs[base + 3] = 1.0
    return obs


def _init_layer(rng: np.random.Generator, n_out: int, n_in: int,
                final: bool = False) -> tuple[np.ndarray, np.ndarray]:
    if final:
        bound = 3e-3
    else:
        bound = 1.0 / math.sqrt(n_in)
    W = rng.uniform(-bound, bound, (n_out, n_in))
    b = rng.uniform(-bound, bound, n_out)
    return W, b


class _MLP3:
    """Three fully connected layers with rectifier activations in between."""

    PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")

    def __init__(self, W1, b1, W2, b2, W3, b3):
        self.W1, self.b1 = W1, b1
        self.W2, self.b2 = W2, b2
        self.W3, self.b3 = W3, b3

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [getattr(self, n).shape for n in self.PARAM_NAMES]

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.PARAM_NAMES}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for n in self.PARAM_NAMES:
            setattr(self, n, params[n].copy())

    def copy(self):
        return type(self)(**{n: getattr(self, n).copy() for n in self.PARAM_NAMES})

    def _body(self, X):
        Z1 = X @ self.W1.T + self.b1
        H1 = np.maximum(Z1, 0.0)
        Z2 = H1 @ self.W2.T + self.b2
        H2 = np.maximum(Z2, 0.0)
        out = H2 @ self.W3.T + self.b3
        return out, (X, Z1, H1, Z2, H2)

    def _body_grads(self, cache, d_out):
        X, Z1, H1, Z2, H2 = cache
        dW3 = d_out.T @ H2
        db3 = d_out.sum(axis=0)
        dH2 = d_out @ self.W3
        dZ2 = dH2 * (Z2 > 0.0)
        dW2 = dZ2.T @ H1
        db2 = dZ2.sum(axis=0)
        dH1 = dZ2 @ self.W2
        dZ1 = dH1 * (Z1 > 0.0)
        dW1 = dZ1.T @ X
        db1 = dZ1.sum(axis=0)
        dX = dZ1 @ self.W1
        grads = {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2,
                 "W3": dW3, "b3": db3}
        return grads, dX


class ActorNet(_MLP3):
    """Deterministic policy network; output squashed to the jerk range."""

    def __init__(self, *params, obs_scale=None, jerk_limit=JERK_LIMIT):
        super().__init__(*params)
        self.obs_scale = DEFAULT_OBS_SCALE.copy() if obs_scale is None else \
            np.asarray(obs_scale, dtype=float)
        self.jerk_limit = jerk_limit

    @staticmethod
    def init(rng: np.random.Generator, obs_dim: int = OBS_DIM,
             hidden: tuple[int, int] = (400, 300)) -> "ActorNet":
        W1, b1 = _init_layer(rng, hidden[0], obs_dim)
        W2, b2 = _init_layer(rng, hidden[1], hidden[0])
        W3, b3 = _init_layer(rng, 1, hidden[1], final=True)
        return ActorNet(W1, b1, W2, b2, W3, b3)

    def copy(self):
        c = ActorNet(*(getattr(self, n).copy() for n in self.PARAM_NAMES),
                     obs_scale=self.obs_scale.copy(), jerk_limit=self.jerk_limit)
        return c

    def forward(self, obs: np.ndarray, cache: bool = False):
        X = np.atleast_2d(obs) * self.obs_scale
        z3, body_cache = self._body(X)
        u = self.jerk_limit * np.tanh(z3)
        if cache:
            return u, (body_cache, z3)
        return u

    def backward(self, cache, d_u):
        """Parameter gradients of sum(d_u * u) via the squashing chain."""
        body_cache, z3 = cache
        t = np.tanh(z3)
        d_z3 = d_u * self.jerk_limit * (1.0 - t * t)
        grads, _ = self._body_grads(body_cache, d_z3)
        return grads


class CriticNet(_MLP3):
    """Action-value network over (observation, action), linear output."""

    def __init__(self, *params, obs_scale=None, action_scale=ACTION_SCALE):
        super().__init__(*params)
        self.obs_scale = DEFAULT_OBS_SCALE.copy() if obs_scale is None else \
            np.asarray(obs_scale, dtype=float)
        self.action_scale = action_scale

    @staticmethod
    def init(rng: np.random.Generator, obs_dim: int = OBS_DIM,
             hidden: tuple[int, int] = (400, 300)) -> "CriticNet":
        W1, b1 = _init_layer(rng, hidden[0], obs_dim + 1)
        W2, b2 = _init_layer(rng, hidden[1], hidden[0])
        W3, b3 = _init_layer(rng, 1, hidden[1], final=True)
        return CriticNet(W1, b1, W2, b2, W3, b3)

    def copy(self):
        return CriticNet(*(getattr(self, n).copy() for n in self.PARAM_NAMES),
                         obs_scale=self.obs_scale.copy(),
                         action_scale=self.action_scale)

    def forward(self, obs: np.ndarray, act: np.ndarray, cache: bool = False):
        obs = np.atleast_2d(obs)
        act = np.asarray(act, dtype=float).reshape(len(obs), 1)
        X = np.concatenate([obs * self.obs_scale, act * self.action_scale],
                           axis=1)
        q, body_cache = self._body(X)
        if cache:
            return q, body_cache
        return q

    def backward(self, cache, d_q):
        """Parameter gradients plus the gradient w.r.t. the raw action."""
        grads, dX = self._body_grads(cache, d_q)
        d_action = dX[:, -1:] * self.action_scale
        return grads, d_action


def act(obs: np.ndarray, actor: ActorNet, noise_scale: float = 0.0,
        rng: np.random.Generator | None = None) -> float:
    """Policy action with optional Gaussian exploration noise, clipped to the
    jerk range. noise_scale 0 gives the deterministic evaluation policy."""
    u = float(actor.forward(obs)[0, 0])
    if noise_scale > 0.0:
        if rng is None:
            raise ValueError("exploration noise requires an rng")
        u += noise_scale * rng.standard_normal()
    return min(max(u, -actor.jerk_limit), actor.jerk_limit)


class Policy:
    """Deterministic WorldState -> jerk controller around a trained actor."""

    tag = "rl"

    def __init__(self, actor: ActorNet, trained_on: str | None = None):
        self.actor = actor
        self.trained_on = trained_on

    def __call__(self, state: WorldState) -> float:
        return act(encode_observation(state), self.actor)


@dataclass
class Transition:
    observation: np.ndarray
    action: float
    reward: float
    next_observation: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros(capacity)
        self.rew = np.zeros(capacity)
        self.nxt = np.zeros((capacity, obs_dim))
        self.term = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.head = 0

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        i = self.head
        self.obs[i] = t.observation
        self.act[i] = t.action
        self.rew[i] = t.reward
        self.nxt[i] = t.next_observation
        self.term[i] = t.terminal
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, batch_size)
        return (self.obs[idx], self.act[idx], self.rew[idx], self.nxt[idx],
                self.term[idx])


@dataclass(frozen=True)
class DDPGHyperparams:
    gamma: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 64
    replay_capacity: int = 200_000
    soft_update: float = 0.005
    noise_scale: float = 1.0
    noise_decay: float = 0.999
    warmup_steps: int = 1000
    episodes: int = 1500
    eval_every: int = 50
    eval_episodes: int = 20
    update_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if min(self.actor_lr, self.critic_lr, self.soft_update) <= 0:
            raise ValueError("learning and update rates must be positive")


class Adam:
    """Adaptive-moment gradient steps over a named parameter set."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, net: _MLP3, grads: dict[str, np.ndarray],
             sign: float = -1.0) -> None:
        """Apply one update; sign -1 descends, +1 ascends."""
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)
            p = getattr(net, k)
            setattr(net, k, p + sign * self.lr * update)


def critic_loss_and_grads(critic: CriticNet, obs, actions, targets):
    """Mean squared Bellman error and its parameter gradients."""
    q, cache = critic.forward(obs, actions, cache=True)
    targets = np.asarray(targets, dtype=float).reshape(q.shape)
    err = q - targets
    loss = float(np.mean(err**2))
    d_q = 2.0 * err / len(err)
    grads, _ = critic.backward(cache, d_q)
    return loss, grads


def actor_objective_and_grads(actor: ActorNet, critic: CriticNet, obs):
    """Mean critic value of the actor's actions, with gradients w.r.t. the
    actor parameters (for gradient ascent)."""
    u, actor_cache = actor.forward(obs, cache=True)
    q, critic_cache = critic.forward(obs, u.ravel(), cache=True)
    objective = float(np.mean(q))
    d_q = np.full_like(q, 1.0 / len(q))
    _, d_action = critic.backward(critic_cache, d_q)
    grads = actor.backward(actor_cache, d_action)
    return objective, grads


def soft_update(target: _MLP3, online: _MLP3, rate: float) -> None:
    for k in target.PARAM_NAMES:
        t = getattr(target, k)
        o = getattr(online, k)
        setattr(target, k, (1.0 - rate) * t + rate * o)


@dataclass
class DDPGNets:
    actor: ActorNet
    critic: CriticNet
    actor_target: ActorNet
    critic_target: CriticNet

    @staticmethod
    def init(rng: np.random.Generator) -> "DDPGNets":
        actor = ActorNet.init(rng)
        critic = CriticNet.init(rng)
        return DDPGNets(actor, critic, actor.copy(), critic.copy())


def ddpg_update(batch, nets: DDPGNets, hyper: DDPGHyperparams,
                critic_opt: Adam, actor_opt: Adam) -> dict[str, float]:
    """One DDPG step: critic regression toward the bootstrapped target,
    actor ascent on the critic, then target soft updates."""
    obs, actions, rewards, next_obs, terminal = batch
    u_next = nets.actor_target.forward(next_obs)
    q_next = nets.critic_target.forward(next_obs, u_next.ravel()).ravel()
    targets = rewards + hyper.gamma * (1.0 - terminal.astype(float)) * q_next

    loss, critic_grads = critic_loss_and_grads(nets.critic, obs, actions,
                                               targets)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"critic loss is not finite: {loss}")
    critic_opt.step(nets.critic, critic_grads, sign=-1.0)

    objective, actor_grads = actor_objective_and_grads(nets.actor, nets.critic,
                                                       obs)
    if not math.isfinite(objective):
        raise TrainingDiverged(f"actor objective is not finite: {objective}")
    actor_opt.step(nets.actor, actor_grads, sign=+1.0)

    soft_update(nets.critic_target, nets.critic, hyper.soft_update)
    soft_update(nets.actor_target, nets.actor, hyper.soft_update)
    return {"critic_loss": loss, "actor_objective": objective}


@dataclass
class TrainResult:
    nets: DDPGNets
    best_nets: DDPGNets
    curve: list[dict]
    best_merge_rate: float


def evaluate_policy(actor: ActorNet, model: TrafficModel, cfg: SimConfig,
                    episodes: int, seed_base: int) -> dict:
    """Deterministic evaluation over a block of seeded episodes."""
    policy = Policy(actor)
    results = []
    for i in range(episodes):
        state = make_initial_state(model, cfg, seed_base + i)
        metrics, _ = run_episode(state, policy)
        results.append(metrics)
    agg = compute_metrics(results)
    return {
        "merge_rate": float(agg.merge_rate),
        "crash_rate": float(agg.crash_rate),
        "mean_abs_jerk": agg.mean_abs_jerk,
        "time_to_merge": agg.time_to_merge,
    }


def train(model: TrafficModel, hyper: DDPGHyperparams | None = None,
          cfg: SimConfig | None = None, out_dir: str | None = None,
          reward_weights: RewardWeights | None = None,
          progress: bool = False) -> TrainResult:
    """Train a DDPG policy on one traffic model.

    Episodes are seeded from the hyperparameter seed, exploration follows a
    decaying Gaussian schedule, and one gradient update runs per environment
    step once the replay buffer passes the warmup size. Periodic deterministic
    evaluations select the checkpoint with the best merge rate (ties: lower
    jerk, then lower time to merge).
    """
    hyper = hyper or DDPGHyperparams()
    cfg = cfg or SimConfig()
    rw = reward_weights or RewardWeights()
    rng = np.random.default_rng(hyper.seed)
    nets = DDPGNets.init(rng)
    critic_opt = Adam(nets.critic.params(), hyper.critic_lr)
    actor_opt = Adam(nets.actor.params(), hyper.actor_lr)
    buffer = ReplayBuffer(hyper.replay_capacity)

    best = None
    best_key = None
    curve: list[dict] = []
    noise = hyper.noise_scale
    steps = 0
    eval_seed_base = 10**6 * (hyper.seed + 1)

    for episode in range(hyper.episodes):
        state = make_initial_state(model, cfg,
                                   np.random.default_rng((hyper.seed, episode)))
        while state.status == STATUS_RUNNING:
            obs = encode_observation(state)
            u_cmd = act(obs, nets.actor, noise, rng)
            nxt = step_episode(state, u_cmd)
            u_real = min(max(nxt.ego_jerk, -JERK_LIMIT), JERK_LIMIT)
            r = reward(u_real, nxt.status, rw)
            buffer.add(Transition(obs, u_real, r, encode_observation(nxt),
                                  nxt.status != STATUS_RUNNING))
            state = nxt
            steps += 1
            if len(buffer) >= hyper.warmup_steps and \
                    steps % hyper.update_every == 0:
                ddpg_update(buffer.sample(hyper.batch_size, rng), nets, hyper,
                            critic_opt, actor_opt)
        noise *= hyper.noise_decay

        if (episode + 1) % hyper.eval_every == 0 or episode + 1 == hyper.episodes:
            stats = evaluate_policy(nets.actor, model, cfg,
                                    hyper.eval_episodes, eval_seed_base)
            stats["episode"] = episode + 1
            stats["noise"] = noise
            curve.append(stats)
            key = (stats["merge_rate"], -stats["mean_abs_jerk"],
                   -(stats["time_to_merge"] or math.inf))
            if best_key is None or key > best_key:
                best_key = key
                best = DDPGNets(nets.actor.copy(), nets.critic.copy(),
                                nets.actor_target.copy(),
                                nets.critic_target.copy())
            if progress:
                print(f"episode {episode + 1}: merge {stats['merge_rate']:.3f} "
                      f"crash {stats['crash_rate']:.3f} "
                      f"jerk {stats['mean_abs_jerk']:.3f} "
                      f"ttm {stats['time_to_merge']} noise {noise:.3f}",
                      flush=True)

    if best is None:
        best = nets
    result = TrainResult(nets=nets, best_nets=best, curve=curve,
                         best_merge_rate=float(best_key[0]) if best_key else 0.0)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_policy(best, os.path.join(out_dir, "best.ckpt"),
                    trained_on=model.name)
        save_policy(result.nets, os.path.join(out_dir, "final.ckpt"),
                    trained_on=model.name)
        with open(os.path.join(out_dir, "training_curve.csv"), "w") as f:
            f.write("episode,merge_rate,crash_rate,mean_abs_jerk,"
                    "time_to_merge,noise\n")
            for row in curve:
                ttm = row["time_to_merge"]
                f.write(f"{row['episode']},{row['merge_rate']:.6f},"
                        f"{row['crash_rate']:.6f},{row['mean_abs_jerk']:.6f},"
                        f"{'' if ttm is None else f'{ttm:.6f}'},"
                        f"{row['noise']:.6f}\n")
    return result


def _net_spec(net: _MLP3) -> list[list[int]]:
    return [list(s) for s in net.shapes]


def save_policy(nets: DDPGNets, path: str, trained_on: str | None = None) -> None:
    """Binary checkpoint: magic, JSON header (shapes, scaling constants,
    conventions), then all parameters as little-endian float64."""
    header = {
        "version": CHECKPOINT_VERSION,
        "actor_shapes": _net_spec(nets.actor),
        "critic_shapes": _net_spec(nets.critic),
        "obs_scale": nets.actor.obs_scale.tolist(),
        "action_scale": nets.critic.action_scale,
        "jerk_limit": nets.actor.jerk_limit,
        "delta_speed_convention": DELTA_SPEED_CONVENTION,
        "trained_on": trained_on,
    }
    blobs = []
    for net in (nets.actor, nets.critic, nets.actor_target, nets.critic_target):
        for name in net.PARAM_NAMES:
            blobs.append(np.ascontiguousarray(getattr(net, name),
                                              dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header).encode() + b"\n")
        for b in blobs:
            f.write(b)


def load_policy(path: str) -> tuple[DDPGNets, dict]:
    """Inverse of save_policy; validates magic, version, shapes and size."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a policy checkpoint")
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header: {e}") from None
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported version {header.get('version')}")
        raw = f.read()

    expected_actor = [list(s) for s in
                      [(400, OBS_DIM), (400,), (300, 400), (300,), (1, 300), (1,)]]
    expected_critic = [list(s) for s in
                       [(400, OBS_DIM + 1), (400,), (300, 400), (300,),
                        (1, 300), (1,)]]
    if header["actor_shapes"] != expected_actor or \
            header["critic_shapes"] != expected_critic:
        raise CheckpointError(f"{path}: layer shape table does not match "
                              "the 20-400-300-1 architecture")
    shapes = (header["actor_shapes"] + header["critic_shapes"]) * 2
    count = sum(int(np.prod(s)) for s in shapes)
    if len(raw) != count * 8:
        raise CheckpointError(f"{path}: expected {count * 8} parameter bytes, "
                              f"found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f8")
    arrays = []
    off = 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[off:off + size].reshape(s).copy())
        off += size
    obs_scale = np.asarray(header["obs_scale"], dtype=float)
    nets = []
    for i, kind in enumerate(("actor", "critic", "actor", "critic")):
        params = arrays[6 * i:6 * (i + 1)]
        if kind == "actor":
            nets.append(ActorNet(*params, obs_scale=obs_scale,
                                 jerk_limit=header["jerk_limit"]))
        else:
            nets.append(CriticNet(*params, obs_scale=obs_scale,
                                  action_scale=header["action_scale"]))
    return DDPGNets(*nets), header

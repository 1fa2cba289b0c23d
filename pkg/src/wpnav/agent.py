"""PPO actor-critic over the compact navigation state.

The state for one time step is ``[z_depth, z_patch, d, sin b, cos b, sin h, cos h]``
(latent embedding, point-goal distance/bearing, heading); the network sees the
last ``frames`` of these stacked, oldest first.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .curriculum import FWP, POINTNAV, CurriculumSchedule, EpisodeGoalState, plan_episode_goals, stage_label
from .environment import Action, NavEnv, Observation, Sensors, sample_episode
from .errors import (ConfigError, DivergedTraining, LengthMismatch, MalformedInput, NonFiniteLoss,
                     ShapeMismatch)
from .grid import OccupancyGrid
from .nncore import (MLP, AdamState, Module, Tensor, adam_apply, as_tensor, clip_grad_norm,
                     minimum, no_grad, softmax, take_rows)
from .nncore.checkpoint import load_checkpoint, save_checkpoint
from .perception import SAMPLE_Z, TwinVae
from .planner import FieldCache, astar

log = logging.getLogger(__name__)

N_ACTIONS = len(Action)
GOAL_FEATURES = 5


@dataclass
class PpoConfig:
    gamma: float = 0.95
    clip_eps: float = 0.1
    gae_lambda: float = 1.0
    epochs: int = 4
    minibatch: int = 64
    horizon: int = 2048
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    lr: float = 2.5e-4
    max_grad_norm: float = 0.5
    num_envs: int = 8
    frames: int = 4
    trunk: tuple = (512, 256)
    head: int = 256

    def __post_init__(self):
        self.trunk = tuple(int(v) for v in self.trunk)
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not (0.0 < self.clip_eps < 1.0):
            raise ConfigError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if not (0.0 <= self.gae_lambda <= 1.0):
            raise ConfigError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.num_envs < 1 or self.horizon < self.num_envs:
            raise ConfigError("need 1 <= num_envs <= horizon")
        if self.frames < 1 or self.epochs < 1 or self.minibatch < 1:
            raise ConfigError("frames, epochs and minibatch must be >= 1")


class PolicyNetwork(Module):
    def __init__(self, in_dim: int, trunk=(512, 256), head: int = 256, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.trunk_sizes = tuple(trunk)
        self.head_size = head
        self.trunk = MLP([in_dim, *trunk], ["tanh"] * len(trunk), rng, "policy.trunk")
        self.pi = MLP([trunk[-1], head, N_ACTIONS], ["tanh", "identity"], rng, "policy.pi")
        self.v = MLP([trunk[-1], head, 1], ["tanh", "identity"], rng, "policy.v")

    def __call__(self, x):
        """(logits (B, 3), values (B,))."""
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"state width {x.shape[-1]} != network input {self.in_dim}")
        h = self.trunk(x)
        return self.pi(h), self.v(h).reshape(-1)


def frame_width(n_z: int) -> int:
    return 2 * n_z + GOAL_FEATURES


def frame_features(latent: np.ndarray, pointgoal, heading: float) -> np.ndarray:
    d, b = pointgoal
    return np.concatenate([latent, [d, math.sin(b), math.cos(b), math.sin(heading), math.cos(heading)]])


class FrameStack:
    def __init__(self, frames: int):
        self.frames = deque(maxlen=frames)

    def reset(self, first: np.ndarray) -> np.ndarray:
        self.frames.clear()
        self.frames.extend([first] * self.frames.maxlen)
        return self.state()

    def push(self, frame: np.ndarray) -> np.ndarray:
        self.frames.append(frame)
        return self.state()

    def state(self) -> np.ndarray:
        return np.concatenate(self.frames)


def act(net: PolicyNetwork, state: np.ndarray, mode: str = "sample", rng=None):
    """(action, log_prob, value) for one state; greedy ties go to the lowest action id."""
    a, lp, v = act_batch(net, np.asarray(state)[None], mode, rng)
    return int(a[0]), float(lp[0]), float(v[0])


def act_batch(net: PolicyNetwork, states: np.ndarray, mode: str = "sample", rng=None):
    with no_grad():
        logits, values = net(states)
    logp = logits.log_softmax().data
    if mode == "greedy":
        actions = np.argmax(logp, axis=1)
    elif mode == "sample":
        cdf = np.cumsum(np.exp(logp), axis=1)
        u = rng.random(len(states))[:, None] * cdf[:, -1:]
        actions = np.minimum((cdf <= u).sum(axis=1), N_ACTIONS - 1)
    else:
        raise ValueError(f"unknown act mode {mode!r}")
    return actions, logp[np.arange(len(states)), actions], values.data.copy()


def action_probabilities(net: PolicyNetwork, state: np.ndarray) -> np.ndarray:
    with no_grad():
        logits, _ = net(np.asarray(state)[None])
    return softmax(logits.data[0])


def compute_gae(rewards, values, dones, bootstrap_value: float, gamma: float, lam: float):
    """Generalized advantage estimates and returns for one environment's sequence.

    ``dones[t]`` marks that the episode ended at step t, so nothing is
    bootstrapped across it.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (len(rewards) == len(values) == len(dones)):
        raise LengthMismatch(f"rewards {len(rewards)}, values {len(values)}, dones {len(dones)}")
    T = len(rewards)
    adv = np.zeros(T)
    next_value = bootstrap_value
    running = 0.0
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def ppo_loss(batch: dict, new_log_probs: Tensor, new_values: Tensor, entropy, config: PpoConfig) -> Tensor:
    """Clipped surrogate + value_coef * value MSE - entropy_coef * entropy.

    ``batch`` holds numpy arrays ``old_log_probs``, ``advantages`` (already
    normalized) and ``returns``.
    """
    adv = batch["advantages"]
    ratio = (new_log_probs - batch["old_log_probs"]).exp()
    clipped = ratio.clip(1.0 - config.clip_eps, 1.0 + config.clip_eps)
    policy_term = -minimum(ratio * adv, clipped * adv).mean()
    diff = new_values - batch["returns"]
    loss = policy_term + config.value_coef * (diff * diff).mean() - config.entropy_coef * as_tensor(entropy)
    if not np.isfinite(loss.data):
        raise NonFiniteLoss("PPO loss is not finite")
    return loss


def policy_forward_loss(net: PolicyNetwork, batch: dict, config: PpoConfig) -> Tensor:
    """Full PPO loss for a minibatch, from states through the network."""
    logits, values = net(batch["states"])
    logp_all = logits.log_softmax()
    new_lp = take_rows(logp_all, batch["actions"])
    entropy = -(logp_all.exp() * logp_all).sum(axis=-1).mean()
    return ppo_loss(batch, new_lp, values, entropy, config)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


# -- checkpoints ------------------------------------------------------------------
# A policy checkpoint carries its frozen encoder ("vae.*" tensors) so it can be
# evaluated on its own; the encoder's own checksum is kept in the metadata.

def policy_to_bytes(net: PolicyNetwork, vae: TwinVae, frames: int, extra: dict | None = None) -> bytes:
    meta = {"kind": "policy", "in_dim": net.in_dim, "trunk": list(net.trunk_sizes),
            "head": net.head_size, "frames": frames, "vae": vae.metadata(),
            "vae_checksum": vae.checksum()}
    meta.update(extra or {})
    params = net.state_dict()
    params.update(vae.state_dict())
    return save_checkpoint(params, meta)


def policy_from_bytes(blob: bytes) -> tuple[PolicyNetwork, TwinVae, dict]:
    params, meta = load_checkpoint(blob)
    if meta.get("kind") != "policy":
        raise ShapeMismatch(f"checkpoint kind {meta.get('kind')!r} is not a policy")
    net = PolicyNetwork(meta["in_dim"], tuple(meta["trunk"]), meta["head"])
    net.load_state_dict({k: v for k, v in params.items() if k.startswith("policy.")})
    vae = TwinVae.from_bytes(save_checkpoint({k: v for k, v in params.items() if k.startswith("vae.")},
                                             meta["vae"]))
    if net.in_dim != meta["frames"] * frame_width(vae.n_z):
        raise ShapeMismatch("policy input width does not match its encoder")
    return net, vae, meta


def policy_params(blob: bytes) -> dict[str, np.ndarray]:
    """Just the "policy.*" tensors of a checkpoint (for fine-tuning from it)."""
    params, meta = load_checkpoint(blob)
    if meta.get("kind") != "policy":
        raise ShapeMismatch(f"checkpoint kind {meta.get('kind')!r} is not a policy")
    return {k: v for k, v in params.items() if k.startswith("policy.")}


# -- acting in an environment -----------------------------------------------------

class NavigationAgent:
    """Policy + frozen encoder + frame stack, usable as ``run_episode`` policy."""

    def __init__(self, net: PolicyNetwork, vae: TwinVae, frames: int, encode_mode: str = SAMPLE_Z,
                 mode: str = "greedy", seed: int = 0, allow_untrained: bool = False):
        if net.in_dim != frames * frame_width(vae.n_z):
            raise ShapeMismatch(f"policy input {net.in_dim} does not match {frames} frames of "
                                f"width {frame_width(vae.n_z)}")
        self.net, self.vae, self.frames = net, vae, frames
        self.encode_mode, self.mode = encode_mode, mode
        self.allow_untrained = allow_untrained
        self.stack = FrameStack(frames)
        self.seed(seed)

    def seed(self, seed):
        self.rng = np.random.default_rng(seed)
        self._fresh = True

    def reset(self):
        self._fresh = True

    def features(self, obs: Observation) -> np.ndarray:
        d, p = self.vae.normalize(obs.depth_scan, obs.patch)
        z = self.vae.encode_normalized(d, p, self.encode_mode, self.rng, self.allow_untrained)
        return frame_features(z, obs.pointgoal, obs.heading)

    def __call__(self, obs: Observation) -> int:
        frame = self.features(obs)
        if self._fresh:
            state = self.stack.reset(frame)
            self._fresh = False
        else:
            state = self.stack.push(frame)
        a, _, _ = act(self.net, state, self.mode, self.rng)
        return a


# -- training ---------------------------------------------------------------------

@dataclass
class EpisodeLog:
    episode: int
    stage: str
    steps: int
    success: int
    spl: float
    ret: float
    env_steps: int          # cumulative environment steps when the episode ended

    def line(self) -> str:
        return (f"{self.episode} {self.stage} {self.steps} {self.success} {float(self.spl)!r} "
                f"{float(self.ret)!r} {self.env_steps}")


LOG_FIELDS = ("episode", "stage", "steps", "success", "spl", "return", "env_steps")


def write_training_log(path, logs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(LOG_FIELDS) + "\n")
        for e in logs:
            fh.write(e.line() + "\n")


def read_training_log(path) -> list[EpisodeLog]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln.split() for ln in fh if ln.strip()]
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedInput(f"cannot read training log {path}: {exc}") from None
    if not lines or tuple(lines[0]) != LOG_FIELDS:
        raise MalformedInput(f"{path}: missing training-log header")
    out = []
    for n, row in enumerate(lines[1:], 2):
        if len(row) != len(LOG_FIELDS):
            raise MalformedInput(f"{path}:{n}: expected {len(LOG_FIELDS)} fields")
        try:
            out.append(EpisodeLog(int(row[0]), row[1], int(row[2]), int(row[3]), float(row[4]),
                                  float(row[5]), int(row[6])))
        except ValueError as exc:
            raise MalformedInput(f"{path}:{n}: {exc}") from None
    if not out:
        raise MalformedInput(f"{path}: no episodes")
    return out


@dataclass
class TrainResult:
    net: PolicyNetwork
    logs: list[EpisodeLog] = field(default_factory=list)
    env_steps: int = 0
    updates: int = 0

    @property
    def success_curve(self) -> np.ndarray:
        return np.array([e.success for e in self.logs], dtype=float)


class RolloutBuffer:
    """Transitions for one update, laid out (env, time) with capacity ``horizon``."""

    def __init__(self, num_envs: int, steps: int, width: int):
        self.num_envs, self.capacity, self.width = num_envs, steps, width
        self.states = np.empty((num_envs, steps, width))
        self.actions = np.empty((num_envs, steps), dtype=np.int64)
        self.log_probs = np.empty((num_envs, steps))
        self.rewards = np.empty((num_envs, steps))
        self.values = np.empty((num_envs, steps))
        self.dones = np.empty((num_envs, steps))
        self.size = 0

    def __len__(self):
        return self.size * self.num_envs

    def add(self, states, actions, log_probs, values):
        t = self.size
        if t >= self.capacity:
            raise ValueError("rollout buffer is full")
        self.states[:, t] = states
        self.actions[:, t] = actions
        self.log_probs[:, t] = log_probs
        self.values[:, t] = values
        self.size += 1
        return t

    def clear(self):
        self.size = 0

    def batch(self, bootstrap: np.ndarray, gamma: float, lam: float) -> dict:
        """Flattened (env-major) batch with normalized advantages."""
        T = self.size
        adv = np.empty((self.num_envs, T))
        ret = np.empty((self.num_envs, T))
        for k in range(self.num_envs):
            adv[k], ret[k] = compute_gae(self.rewards[k, :T], self.values[k, :T], self.dones[k, :T],
                                         bootstrap[k], gamma, lam)
        return {
            "states": self.states[:, :T].reshape(self.num_envs * T, -1).copy(),
            "actions": self.actions[:, :T].reshape(-1).copy(),
            "old_log_probs": self.log_probs[:, :T].reshape(-1).copy(),
            "advantages": normalize_advantages(adv.reshape(-1)),
            "returns": ret.reshape(-1),
        }


class PpoTrainer:
    """Synchronous PPO over ``num_envs`` lockstep environments in one process.

    Transitions are stored per environment and flattened in environment-index
    order, so results depend only on (seed, config), never on timing.
    ``episode_source(rng, episode_id)`` may replace the random episode sampler.
    """

    def __init__(self, grid: OccupancyGrid, vae: TwinVae, schedule: CurriculumSchedule,
                 config: PpoConfig = PpoConfig(), seed: int = 0, encode_mode: str = SAMPLE_Z,
                 init_params: dict | None = None, sensors: Sensors | None = None,
                 allow_untrained: bool = False, min_geodesic: float = 1.0, max_steps: int = 500,
                 fields: FieldCache | None = None, episode_source=None):
        self.grid, self.vae, self.schedule, self.config = grid, vae, schedule, config
        self.encode_mode = encode_mode
        self.allow_untrained = allow_untrained
        self.min_geodesic, self.max_steps = min_geodesic, max_steps
        self.episode_source = episode_source
        self.seed = seed
        in_dim = config.frames * frame_width(vae.n_z)
        self.net = PolicyNetwork(in_dim, config.trunk, config.head, seed=seed)
        if init_params is not None:
            self.net.load_state_dict(init_params)
        self.opt = AdamState(lr=config.lr)
        self.act_rng = np.random.default_rng([seed, 1])
        self.episode_rng = np.random.default_rng([seed, 2])
        self.noise_rng = np.random.default_rng([seed, 3])
        self.update_rng = np.random.default_rng([seed, 4])
        self.fields = fields if fields is not None else FieldCache(grid)
        sensors = sensors or Sensors(vae.sensor_config)
        K = config.num_envs
        self.envs = [NavEnv(grid, self.fields, sensors) for _ in range(K)]
        self.stacks = [FrameStack(config.frames) for _ in range(K)]
        self.buffer = RolloutBuffer(K, config.horizon // K, in_dim)
        self.next_episode = 0
        self.env_episode = [0] * K
        self.env_stage = [""] * K
        self.result = TrainResult(self.net)
        self.stage_changes: list[tuple[int, str]] = []
        self._obs = None
        self._states = None

    # episode management

    def _goals(self, spec, episode: int) -> EpisodeGoalState:
        if self.schedule.kind == POINTNAV:
            return EpisodeGoalState((spec.goal,), spec.goal)
        path = astar(self.grid, (spec.start.x, spec.start.y), spec.goal)
        return plan_episode_goals(self.schedule, episode, path, spec.goal)

    def _sample(self, ep: int):
        if self.episode_source is not None:
            return self.episode_source(self.episode_rng, ep)
        return sample_episode(self.grid, self.episode_rng, self.fields, self.min_geodesic,
                              self.max_steps, episode_id=ep)

    def _start_episode(self, k: int):
        """Begin the next episode on env k; episodes that succeed at reset are logged and skipped."""
        while True:
            ep = self.next_episode
            self.next_episode += 1
            spec = self._sample(ep)
            label = stage_label(self.schedule, ep)
            if not self.stage_changes or self.stage_changes[-1][1] != label:
                self.stage_changes.append((ep, label))
                # the FWP fraction changes every episode
                level = logging.DEBUG if self.schedule.kind == FWP else logging.INFO
                log.log(level, "episode %d: curriculum stage %s", ep, label)
            obs = self.envs[k].reset(spec, self._goals(spec, ep))
            self.env_episode[k] = ep
            self.env_stage[k] = label
            if not self.envs[k].done:
                return obs
            self._log_episode(k)

    def _log_episode(self, k: int):
        tr = self.envs[k].trace
        spl = float(np.mean(tr.segment_spl)) if tr.segment_spl else 0.0
        self.result.logs.append(EpisodeLog(self.env_episode[k], self.env_stage[k], tr.steps,
                                           int(tr.success), spl, tr.total_reward,
                                           self.result.env_steps))

    def _encode(self, observations) -> np.ndarray:
        depth = np.stack([o.depth_scan for o in observations])
        patch = np.stack([o.patch for o in observations])
        d, p = self.vae.normalize(depth, patch)
        z = self.vae.encode_normalized(d, p, self.encode_mode, self.noise_rng, self.allow_untrained)
        return np.stack([frame_features(z[i], o.pointgoal, o.heading)
                         for i, o in enumerate(observations)])

    # main loop

    def collect(self, steps_per_env: int | None = None) -> RolloutBuffer:
        """Fill the buffer with ``steps_per_env`` lockstep steps per environment (sampled actions)."""
        K = self.config.num_envs
        T = self.buffer.capacity if steps_per_env is None else min(steps_per_env, self.buffer.capacity)
        if self._states is None:
            self._obs = [self._start_episode(k) for k in range(K)]
            frames = self._encode(self._obs)
            self._states = np.stack([self.stacks[k].reset(frames[k]) for k in range(K)])
        buf, obs, states = self.buffer, self._obs, self._states
        for _ in range(T):
            actions, logps, values = act_batch(self.net, states, "sample", self.act_rng)
            t = buf.add(states, actions, logps, values)
            for k in range(K):
                obs[k], r, done = self.envs[k].step(int(actions[k]))
                self.result.env_steps += 1
                buf.rewards[k, t] = r
                buf.dones[k, t] = float(done)
                if done:
                    self._log_episode(k)
                    obs[k] = self._start_episode(k)
            frames = self._encode(obs)
            for k in range(K):
                if buf.dones[k, t]:
                    states[k] = self.stacks[k].reset(frames[k])
                else:
                    states[k] = self.stacks[k].push(frames[k])
        return buf

    def update(self):
        """One PPO update from the filled buffer, which is then cleared."""
        cfg = self.config
        _, _, boot = act_batch(self.net, self._states, "greedy")
        batch = self.buffer.batch(boot, cfg.gamma, cfg.gae_lambda)
        self._update(batch)
        self.buffer.clear()

    def train(self, total_steps: int | None = None, total_episodes: int | None = None,
              on_update=None) -> TrainResult:
        if total_steps is None and total_episodes is None:
            raise ConfigError("give total_steps or total_episodes")
        K = self.config.num_envs
        while True:
            remaining = None if total_steps is None else total_steps - self.result.env_steps
            if remaining is not None and remaining <= 0:
                break
            if total_episodes is not None and len(self.result.logs) >= total_episodes:
                break
            self.collect(None if remaining is None else -(-remaining // K))
            self.update()
            if on_update is not None:
                on_update(self)
        return self.result

    def _update(self, batch: dict):
        cfg = self.config
        params = self.net.parameters()
        n = len(batch["actions"])
        for _ in range(cfg.epochs):
            perm = self.update_rng.permutation(n)
            for i in range(0, n, cfg.minibatch):
                idx = perm[i:i + cfg.minibatch]
                mb = {key: val[idx] for key, val in batch.items()}
                try:
                    loss = policy_forward_loss(self.net, mb, cfg)
                except NonFiniteLoss as exc:
                    raise DivergedTraining(str(exc)) from None
                loss.backward()
                clip_grad_norm(params, cfg.max_grad_norm)
                adam_apply(params, self.opt)
        self.result.updates += 1

    def checkpoint(self, extra: dict | None = None) -> bytes:
        meta = {"map_hash": self.grid.map_hash(), "encode_mode": self.encode_mode, "env_steps": self.result.env_steps,
                "episodes": len(self.result.logs), "updates": self.result.updates,
                "curriculum": self.schedule.label, "seed": self.seed,
                "ppo": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.config).items()}}
        meta.update(extra or {})
        return policy_to_bytes(self.net, self.vae, self.config.frames, meta)

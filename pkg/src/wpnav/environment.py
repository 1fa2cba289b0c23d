"""PointNav on an occupancy grid: kinematics, sensors, reward and episodes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from ._kernels import cast_rays, segment_blocked
from .errors import InsufficientFreeSpace, InvalidSpec, MalformedInput
from .grid import OccupancyGrid
from .planner import FieldCache

FORWARD_STEP = 0.25
TURN_DEG = 10
N_HEADINGS = 360 // TURN_DEG
SUCCESS_RADIUS = 0.2
GOAL_BONUS = 10.0
SLACK_PENALTY = -0.01
MAX_STEPS = 500

_HEADINGS = np.arange(N_HEADINGS) * (2.0 * math.pi / N_HEADINGS)
_COS = np.cos(_HEADINGS)
_SIN = np.sin(_HEADINGS)
_COS[[9, 27]] = 0.0   # exact axis directions
_SIN[[0, 18]] = 0.0


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2


@dataclass(frozen=True)
class Pose:
    """Agent pose. Heading is stored as an index into the 36 ten-degree headings."""
    x: float
    y: float
    k: int = 0

    @property
    def heading(self) -> float:
        return float(_HEADINGS[self.k % N_HEADINGS])

    @classmethod
    def from_heading(cls, x: float, y: float, heading: float) -> "Pose":
        k = int(round(heading / (2.0 * math.pi / N_HEADINGS))) % N_HEADINGS
        return cls(float(x), float(y), k)


@dataclass(frozen=True)
class SensorConfig:
    num_rays: int = 64
    fov_deg: float = 90.0
    max_range: float = 5.0
    patch_size: int = 16
    patch_cell: float = 0.1


@dataclass
class Observation:
    depth_scan: np.ndarray      # (R,) meters, leftmost ray first
    patch: np.ndarray           # (P, P) uint8, row 0 farthest ahead, col 0 leftmost
    pointgoal: tuple[float, float]   # (distance m, bearing rad in (-pi, pi])
    heading: float


def normalize_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    b = math.remainder(a, 2.0 * math.pi)
    if b <= -math.pi:
        b += 2.0 * math.pi
    return b


def step(pose: Pose, action: int, grid: OccupancyGrid) -> Pose:
    """Apply one action. A forward move whose swept segment touches a blocked cell is a no-op."""
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, (pose.k + 1) % N_HEADINGS)
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, (pose.k - 1) % N_HEADINGS)
    if action != Action.FORWARD:
        raise ValueError(f"unknown action {action!r}")
    nx = pose.x + FORWARD_STEP * _COS[pose.k]
    ny = pose.y + FORWARD_STEP * _SIN[pose.k]
    if segment_blocked(grid.blocked, grid.cell_size, pose.x, pose.y, nx, ny):
        return pose
    return Pose(float(nx), float(ny), pose.k)


class Sensors:
    """Precomputed ray angles and patch sampling offsets for one sensor configuration."""

    def __init__(self, config: SensorConfig = SensorConfig()):
        self.config = config
        fov = math.radians(config.fov_deg)
        r = config.num_rays
        # ray r//2 points exactly along the heading
        self.ray_offsets = fov / 2.0 - np.arange(r) * (fov / r)
        p = config.patch_size
        ahead = (p / 2.0 - np.arange(p) - 0.5) * config.patch_cell
        left = (p / 2.0 - np.arange(p) - 0.5) * config.patch_cell
        fwd, lat = np.meshgrid(ahead, left, indexing="ij")
        # world offsets per heading index: (36, P, P)
        c = _COS[:, None, None]
        s = _SIN[:, None, None]
        self._dx = fwd[None] * c - lat[None] * s
        self._dy = fwd[None] * s + lat[None] * c

    def depth(self, pose: Pose, grid: OccupancyGrid) -> np.ndarray:
        angles = pose.heading + self.ray_offsets
        out = np.empty(self.config.num_rays)
        return cast_rays(grid.cells, grid.cell_size, pose.x, pose.y, angles,
                         self.config.max_range, out)

    def patch(self, pose: Pose, grid: OccupancyGrid) -> np.ndarray:
        cs = grid.cell_size
        cols = np.floor((pose.x + self._dx[pose.k]) / cs).astype(np.int64)
        rows = np.floor((pose.y + self._dy[pose.k]) / cs).astype(np.int64)
        inside = (rows >= 0) & (rows < grid.height) & (cols >= 0) & (cols < grid.width)
        out = np.ones(rows.shape, dtype=np.uint8)
        out[inside] = grid.cells[rows[inside], cols[inside]]
        return out

    def observe(self, pose: Pose, goal, grid: OccupancyGrid) -> Observation:
        dx, dy = goal[0] - pose.x, goal[1] - pose.y
        dist = math.hypot(dx, dy)
        bearing = normalize_angle(math.atan2(dy, dx) - pose.heading) if dist > 0 else 0.0
        return Observation(self.depth(pose, grid), self.patch(pose, grid),
                           (dist, bearing), pose.heading)


_DEFAULT_SENSORS: Sensors | None = None


def observe(pose: Pose, goal, grid: OccupancyGrid, sensors: Sensors | None = None) -> Observation:
    global _DEFAULT_SENSORS
    if sensors is None:
        if _DEFAULT_SENSORS is None:
            _DEFAULT_SENSORS = Sensors()
        sensors = _DEFAULT_SENSORS
    return sensors.observe(pose, goal, grid)


def reward(d_prev: float, d_curr: float, goal_reached: bool) -> float:
    r = d_prev - d_curr + SLACK_PENALTY
    return r + GOAL_BONUS if goal_reached else r


@dataclass(frozen=True)
class EpisodeSpec:
    start: Pose
    goal: tuple[float, float]
    shortest_path_length: float
    max_steps: int = MAX_STEPS
    success_radius: float = SUCCESS_RADIUS
    episode_id: int = 0


def validate_spec(spec: EpisodeSpec, grid: OccupancyGrid):
    if not grid.is_free(spec.start.x, spec.start.y):
        raise InvalidSpec(f"start {spec.start} is in blocked space")
    if not grid.is_free(*spec.goal):
        raise InvalidSpec(f"goal {spec.goal} is in blocked space")


def straight_line_free(grid: OccupancyGrid, a, b) -> bool:
    return not segment_blocked(grid.blocked, grid.cell_size, a[0], a[1], b[0], b[1])


def sample_episode(grid: OccupancyGrid, rng: np.random.Generator, fields: FieldCache,
                   min_geodesic: float = 1.0, max_steps: int = MAX_STEPS,
                   episode_id: int = 0, max_tries: int = 10_000) -> EpisodeSpec:
    """Random start/goal cell centers with a blocked straight line and geodesic >= ``min_geodesic``."""
    free = grid.free_cells()
    if len(free) < 2:
        raise InsufficientFreeSpace(f"map has {len(free)} free cells")
    for _ in range(max_tries):
        i, j = rng.integers(len(free), size=2)
        k = int(rng.integers(N_HEADINGS))
        if i == j:
            continue
        start = grid.center(*free[i])
        goal = grid.center(*free[j])
        l = fields.geodesic(start, goal)
        if not (math.isfinite(l) and l >= min_geodesic):
            continue
        if straight_line_free(grid, start, goal):
            continue
        return EpisodeSpec(Pose(start[0], start[1], k), goal, l, max_steps=max_steps,
                           episode_id=episode_id)
    raise InsufficientFreeSpace(f"no valid episode found in {max_tries} tries")


@dataclass
class Transition:
    t: int
    pose: Pose          # pose after the action
    action: int
    reward: float
    d: float            # geodesic distance to the active target after the action
    target: tuple[float, float]


@dataclass
class EpisodeTrace:
    spec: EpisodeSpec
    transitions: list[Transition] = field(default_factory=list)
    d0: float = 0.0
    success: bool = False
    path_length: float = 0.0
    segment_spl: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.transitions)

    @property
    def total_reward(self) -> float:
        return float(sum(tr.reward for tr in self.transitions))

    @property
    def final_pose(self) -> Pose:
        return self.transitions[-1].pose if self.transitions else self.spec.start


class NavEnv:
    """One PointNav episode at a time.

    ``reset`` takes an episode spec and an optional sub-goal state (see
    ``wpnav.curriculum.EpisodeGoalState``); without one the target is the
    episode goal. Rewards use the geodesic distance to the active target and
    restart from the new target's field when the target advances.
    """

    def __init__(self, grid: OccupancyGrid, fields: FieldCache | None = None,
                 sensors: Sensors | None = None):
        self.grid = grid
        self.fields = fields if fields is not None else FieldCache(grid)
        self.sensors = sensors if sensors is not None else Sensors()

    def reset(self, spec: EpisodeSpec, goals=None) -> Observation:
        validate_spec(spec, self.grid)
        self.spec = spec
        self.goals = goals
        self.pose = spec.start
        self.t = 0
        self.final_goal = tuple(goals.final_goal) if goals is not None else tuple(spec.goal)
        self.target = self._current_target()
        self.field = self.fields.get(self.target)
        self.d_prev = self.field.query(self.pose.x, self.pose.y)
        self.trace = EpisodeTrace(spec, d0=self.d_prev)
        self._seg_l = self.d_prev
        self._seg_p = 0.0
        self.done = self._reached()
        if self.done:
            self.trace.success = True
            self._close_segments()
        return self.observe()

    def _current_target(self):
        if self.goals is None:
            return self.final_goal
        return tuple(self.goals.current_target(self.pose))

    def _reached(self) -> bool:
        return math.dist((self.pose.x, self.pose.y), self.final_goal) <= self.spec.success_radius

    def observe(self) -> Observation:
        return self.sensors.observe(self.pose, self.target, self.grid)

    def _segment_spl(self, reached: bool) -> float:
        if not reached:
            return 0.0
        if self._seg_l <= 0.0:
            return 1.0
        return self._seg_l / max(self._seg_l, self._seg_p)

    def _close_segments(self):
        n = len(self.goals.waypoints) if self.goals is not None else 1
        done_before = len(self.trace.segment_spl)
        if self.trace.success:
            self.trace.segment_spl.append(self._segment_spl(True))
            # waypoints skipped by multi-advance at the end count as reached
            while len(self.trace.segment_spl) < n:
                self.trace.segment_spl.append(1.0)
        else:
            self.trace.segment_spl.extend([0.0] * (n - done_before))

    def step(self, action: int):
        """Returns (observation, reward, done)."""
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        before = self.pose
        self.pose = step(self.pose, action, self.grid)
        moved = math.hypot(self.pose.x - before.x, self.pose.y - before.y)
        self.trace.path_length += moved
        self._seg_p += moved
        self.t += 1
        d_curr = self.field.query(self.pose.x, self.pose.y)
        reached = self._reached()
        r = reward(self.d_prev, d_curr, reached)
        self.trace.transitions.append(Transition(self.t, self.pose, int(action), r, d_curr, self.target))
        self.d_prev = d_curr
        if reached:
            self.trace.success = True
            self.done = True
            self._close_segments()
        elif self.t >= self.spec.max_steps:
            self.done = True
            self._close_segments()
        elif self.goals is not None:
            new_target = self._current_target()
            if new_target != self.target:
                skipped = self.goals.active_index - len(self.trace.segment_spl) - 1
                self.trace.segment_spl.append(self._segment_spl(True))
                self.trace.segment_spl.extend([1.0] * max(0, skipped))
                self.target = new_target
                self.field = self.fields.get(new_target)
                self.d_prev = self.field.query(self.pose.x, self.pose.y)
                self._seg_l = self.d_prev
                self._seg_p = 0.0
        return self.observe(), r, self.done


def run_episode(spec: EpisodeSpec, policy, grid: OccupancyGrid, goals=None,
                env: NavEnv | None = None) -> EpisodeTrace:
    """Roll out ``policy`` (callable Observation -> action) until success or ``max_steps``.

    If the policy has a ``reset()`` method it is called first.
    """
    env = env if env is not None else NavEnv(grid)
    obs = env.reset(spec, goals)
    if hasattr(policy, "reset"):
        policy.reset()
    while not env.done:
        obs, _, _ = env.step(policy(obs))
    return env.trace


TRAJECTORY_FIELDS = ("episode_id", "t", "x", "y", "heading", "action", "reward", "d_t")


def trajectory_lines(trace: EpisodeTrace) -> list[str]:
    """One whitespace-separated record per step, fields in TRAJECTORY_FIELDS order.

    Row t=0 is the start pose with action -1 and reward 0.
    """
    eid = trace.spec.episode_id
    s = trace.spec.start
    rows = [f"{eid} 0 {float(s.x)!r} {float(s.y)!r} {s.heading!r} -1 0.0 {float(trace.d0)!r}"]
    for tr in trace.transitions:
        p = tr.pose
        rows.append(f"{eid} {tr.t} {float(p.x)!r} {float(p.y)!r} {p.heading!r} {tr.action} "
                    f"{float(tr.reward)!r} {float(tr.d)!r}")
    return rows


def write_trajectories(path, traces) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(TRAJECTORY_FIELDS) + "\n")
        for tr in traces:
            fh.write("\n".join(trajectory_lines(tr)) + "\n")


def read_trajectories(path) -> dict[int, np.ndarray]:
    """Trajectory file -> {episode_id: (T+1, 7) array of t, x, y, heading, action, reward, d_t}."""
    out: dict[int, list] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != len(TRAJECTORY_FIELDS):
                raise MalformedInput(f"{path}:{ln}: expected {len(TRAJECTORY_FIELDS)} fields")
            try:
                out.setdefault(int(parts[0]), []).append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise MalformedInput(f"{path}:{ln}: {exc}") from None
    if not out:
        raise MalformedInput(f"{path}: no trajectory records")
    return {k: np.array(v) for k, v in out.items()}

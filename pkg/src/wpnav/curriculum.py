"""Waypoint curricula: PointNav, WP-N, sequential WP-N and the farther-waypoint ramp."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import ConfigError
from .planner import PlannedPath, extract_waypoints, off_corner, point_at_fraction

POINTNAV, WPN, SWPN, FWP = "pointnav", "wpn", "swpn", "fwp"
KINDS = (POINTNAV, WPN, SWPN, FWP)

# (first episode of stage, number of waypoints)
SWP10_STAGES = ((0, 10), (10_000, 8), (20_000, 6), (30_000, 4),
                (40_000, 3), (60_000, 2), (80_000, 1))

ADVANCE_RADIUS = 0.2


@dataclass(frozen=True)
class CurriculumSchedule:
    kind: str = POINTNAV
    n: int = 1
    stages: tuple = SWP10_STAGES
    f_start: float = 0.2
    f_end: float = 1.0
    ramp_episodes: int = 64_000

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown curriculum kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == WPN and self.n < 1:
            raise ConfigError(f"WP-N needs n >= 1, got {self.n}")
        if self.kind == SWPN:
            starts = [s for s, _ in self.stages]
            ns = [n for _, n in self.stages]
            if not self.stages or starts[0] != 0:
                raise ConfigError("stage table must start at episode 0")
            if any(b <= a for a, b in zip(starts, starts[1:])):
                raise ConfigError(f"stage boundaries must be strictly increasing: {starts}")
            if any(b >= a for a, b in zip(ns, ns[1:])):
                raise ConfigError(f"stage n values must be strictly decreasing: {ns}")
            if ns[-1] != 1:
                raise ConfigError("final stage must be n = 1 (PointNav)")
        if self.kind == FWP:
            if not (0.0 < self.f_start <= self.f_end <= 1.0):
                raise ConfigError("need 0 < f_start <= f_end <= 1")
            if self.f_end != 1.0:
                raise ConfigError("f_end must be 1.0 so training ends as PointNav")
            if self.ramp_episodes < 1:
                raise ConfigError("ramp_episodes must be >= 1")

    def scaled(self, stage_scale: float) -> "CurriculumSchedule":
        """Divide every episode boundary by 1/stage_scale (e.g. 0.01 maps 10k -> 100)."""
        if stage_scale == 1.0:
            return self
        stages = tuple((int(round(s * stage_scale)), n) for s, n in self.stages)
        ramp = max(1, int(round(self.ramp_episodes * stage_scale)))
        return replace(self, stages=stages, ramp_episodes=ramp)

    @property
    def label(self) -> str:
        if self.kind == WPN:
            return f"WP-{self.n}"
        if self.kind == SWPN:
            return f"SWP-{self.stages[0][1]}"
        return {POINTNAV: "PointNav", FWP: "FWP"}[self.kind]


def stage_for_episode(schedule: CurriculumSchedule, episode: int):
    """Number of waypoints (int) for discrete schedules, target fraction (float) for FWP."""
    if schedule.kind == POINTNAV:
        return 1
    if schedule.kind == WPN:
        return schedule.n
    if schedule.kind == SWPN:
        n = schedule.stages[0][1]
        for start, stage_n in schedule.stages:
            if episode >= start:
                n = stage_n
            else:
                break
        return n
    f = schedule.f_start + (schedule.f_end - schedule.f_start) * episode / schedule.ramp_episodes
    return min(schedule.f_end, f)


def stage_label(schedule: CurriculumSchedule, episode: int) -> str:
    stage = stage_for_episode(schedule, episode)
    if schedule.kind == FWP:
        return f"f={stage:.4f}"
    return f"WP-{stage}"


@dataclass
class EpisodeGoalState:
    waypoints: tuple
    final_goal: tuple
    active_index: int = 0

    @property
    def target(self) -> tuple:
        return self.waypoints[self.active_index]

    def current_target(self, pose) -> tuple:
        """Advance past every non-final waypoint within the radius, then return the target."""
        last = len(self.waypoints) - 1
        while (self.active_index < last and
               math.dist((pose.x, pose.y), self.waypoints[self.active_index]) < ADVANCE_RADIUS):
            self.active_index += 1
        return self.waypoints[self.active_index]


def current_target(state: EpisodeGoalState, pose) -> tuple:
    return state.current_target(pose)


def plan_episode_goals(schedule: CurriculumSchedule, episode: int, path: PlannedPath | None,
                       goal=None) -> EpisodeGoalState:
    """Sub-goals for one episode. ``path`` may be None only for PointNav."""
    goal = tuple(goal) if goal is not None else path.goal
    if schedule.kind == POINTNAV:
        return EpisodeGoalState((goal,), goal)
    stage = stage_for_episode(schedule, episode)
    if schedule.kind == FWP:
        if stage >= 1.0:
            return EpisodeGoalState((goal,), goal)
        wp = off_corner(path, point_at_fraction(path, stage))
        return EpisodeGoalState((wp,), wp)
    if stage == 1:
        return EpisodeGoalState((goal,), goal)
    wps = [off_corner(path, w) for w in extract_waypoints(path, stage)]
    wps[-1] = goal
    return EpisodeGoalState(tuple(wps), goal)


def parse_stages(text: str) -> tuple:
    """'0:10,10000:8,...' -> ((0, 10), (10000, 8), ...)."""
    try:
        out = tuple((int(a), int(b)) for a, b in (item.split(":") for item in text.split(",") if item.strip()))
    except ValueError:
        raise ConfigError(f"bad stage table {text!r}; expected 'episode:n,...'") from None
    return out


def format_stages(stages) -> str:
    return ",".join(f"{s}:{n}" for s, n in stages)

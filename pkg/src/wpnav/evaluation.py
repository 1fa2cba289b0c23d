"""SPL, success rate, smoothed curves and the fixed-suite test harness."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .environment import (MAX_STEPS, N_HEADINGS, Action, EpisodeSpec, NavEnv, Pose, run_episode,
                          sample_episode, step, validate_spec)
from .errors import EmptyInput, MalformedInput, MapMismatch, NonPositiveShortestPath
from .grid import OccupancyGrid
from .planner import FieldCache


def spl(success, l: float, p: float) -> float:
    """Success weighted by (shortest length / max(shortest, travelled))."""
    if not l > 0:
        raise NonPositiveShortestPath(f"shortest path length must be > 0, got {l}")
    if not success:
        return 0.0
    return float(l / max(l, p))


def ema_curve(values, alpha: float = 0.001) -> np.ndarray:
    """y_0 = x_0, y_t = alpha x_t + (1 - alpha) y_{t-1}."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("ema_curve needs at least one value")
    y, _ = lfilter([alpha], [1.0, alpha - 1.0], x, zi=[(1.0 - alpha) * x[0]])
    return y


# -- episode suites ---------------------------------------------------------------

@dataclass
class EpisodeSuite:
    map_hash: str
    seed: int
    episodes: list[EpisodeSpec]

    def __len__(self) -> int:
        return len(self.episodes)

    def to_text(self) -> str:
        max_steps = self.episodes[0].max_steps if self.episodes else MAX_STEPS
        lines = [f"suite {self.map_hash} {self.seed} {len(self.episodes)} {max_steps}",
                 "# episode_id start_x start_y start_heading_index goal_x goal_y shortest_length"]
        for e in self.episodes:
            x, y, gx, gy, l = map(float, (e.start.x, e.start.y, e.goal[0], e.goal[1], e.shortest_path_length))
            lines.append(f"{e.episode_id} {x!r} {y!r} {e.start.k} {gx!r} {gy!r} {l!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EpisodeSuite":
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        try:
            tag, map_hash, seed, count, max_steps = rows[0]
            if tag != "suite":
                raise ValueError("missing suite header")
            episodes = []
            for r in rows[1:]:
                if len(r) != 7:
                    raise ValueError(f"bad record {' '.join(r)!r}")
                episodes.append(EpisodeSpec(Pose(float(r[1]), float(r[2]), int(r[3])),
                                            (float(r[4]), float(r[5])), float(r[6]),
                                            max_steps=int(max_steps), episode_id=int(r[0])))
            if len(episodes) != int(count):
                raise ValueError(f"header says {count} episodes, found {len(episodes)}")
        except (IndexError, ValueError) as exc:
            raise MalformedInput(f"malformed suite file: {exc}") from None
        return cls(map_hash, int(seed), episodes)


def generate_suite(grid: OccupancyGrid, n_episodes: int = 500, seed: int = 0,
                   min_geodesic: float = 1.0, max_steps: int = MAX_STEPS,
                   fields: FieldCache | None = None) -> EpisodeSuite:
    rng = np.random.default_rng(seed)
    fields = fields if fields is not None else FieldCache(grid)
    episodes = [sample_episode(grid, rng, fields, min_geodesic, max_steps, episode_id=i)
                for i in range(n_episodes)]
    return EpisodeSuite(grid.map_hash(), seed, episodes)


def write_suite(path, suite: EpisodeSuite) -> None:
    Path(path).write_text(suite.to_text())


def read_suite(path) -> EpisodeSuite:
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedInput(f"cannot read suite {path}: {exc}") from None
    return EpisodeSuite.from_text(text)


# -- reports ----------------------------------------------------------------------

@dataclass
class EpisodeResult:
    episode_id: int
    success: int
    spl: float
    path_length: float
    shortest: float
    steps: int


REPORT_COLUMNS = ("episode_id", "success", "spl", "path_length", "shortest", "steps")


@dataclass
class EvalReport:
    results: list[EpisodeResult] = field(default_factory=list)
    label: str = ""

    @property
    def mean_spl(self) -> float:
        return float(np.mean([r.spl for r in self.results])) if self.results else 0.0

    @property
    def mean_success(self) -> float:
        return float(np.mean([r.success for r in self.results])) if self.results else 0.0

    def to_text(self) -> str:
        lines = [" ".join(REPORT_COLUMNS)]
        for r in self.results:
            lines.append(f"{r.episode_id} {r.success} {r.spl:.6f} {r.path_length:.6f} "
                         f"{r.shortest:.6f} {r.steps}")
        lines.append(f"# mean_spl {self.mean_spl:.6f}")
        lines.append(f"# mean_success {self.mean_success:.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, label: str = "") -> "EvalReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].split() != list(REPORT_COLUMNS):
            raise MalformedInput("report is missing its column header")
        results = []
        try:
            for ln in lines[1:]:
                if ln.startswith("#"):
                    continue
                a = ln.split()
                if len(a) != len(REPORT_COLUMNS):
                    raise ValueError(f"bad row {ln!r}")
                results.append(EpisodeResult(int(a[0]), int(a[1]), float(a[2]), float(a[3]),
                                             float(a[4]), int(a[5])))
        except ValueError as exc:
            raise MalformedInput(f"malformed report: {exc}") from None
        if not results:
            raise MalformedInput("report has no episodes")
        return cls(results, label)


def check_map(suite: EpisodeSuite, grid: OccupancyGrid, checkpoint_map_hash: str | None = None):
    if suite.map_hash != grid.map_hash():
        raise MapMismatch(f"suite was generated on map {suite.map_hash}, "
                          f"but the given map hashes to {grid.map_hash()}")
    if checkpoint_map_hash is not None and checkpoint_map_hash != suite.map_hash:
        raise MapMismatch(f"checkpoint was trained on map {checkpoint_map_hash}, "
                          f"suite belongs to map {suite.map_hash}")


def evaluate(policy, suite: EpisodeSuite, grid: OccupancyGrid, goals_for=None,
             fields: FieldCache | None = None, seed: int = 0, env: NavEnv | None = None) -> EvalReport:
    """Run every suite episode with ``policy`` (callable Observation -> action).

    If the policy has ``seed(s)``, it is reseeded per episode from (seed, episode id),
    so results do not depend on episode order. ``goals_for(spec)`` may supply
    sub-goals; by default the agent sees only the final goal.
    """
    check_map(suite, grid)
    if env is None:
        env = NavEnv(grid, fields if fields is not None else FieldCache(grid))
    report = EvalReport()
    for spec in suite.episodes:
        validate_spec(spec, grid)
        if hasattr(policy, "seed"):
            policy.seed([seed, spec.episode_id])
        goals = goals_for(spec) if goals_for is not None else None
        trace = run_episode(spec, policy, grid, goals=goals, env=env)
        report.results.append(EpisodeResult(spec.episode_id, int(trace.success),
                                            spl(trace.success, spec.shortest_path_length, trace.path_length),
                                            trace.path_length, spec.shortest_path_length, trace.steps))
    return report


class GeodesicOracle:
    """Scripted expert: turn toward the heading whose forward step most reduces the
    geodesic distance to the environment's active target, then step forward.

    Reads ``env.pose`` and ``env.field`` directly, so it is a test fixture for the
    environment and metrics, not a learned agent.
    """

    def __init__(self, env: NavEnv):
        self.env = env

    def _forward(self, x: float, y: float, k: int):
        nxt = step(Pose(x, y, k), Action.FORWARD, self.env.grid)
        return nxt, self.env.field.query(nxt.x, nxt.y)

    def _best_heading(self) -> int:
        pose = self.env.pose
        here = self.env.field.query(pose.x, pose.y)
        order = [(pose.k + dk) % N_HEADINGS
                 for dk in sorted(range(N_HEADINGS), key=lambda d: (min(d, N_HEADINGS - d), d))]
        best_k, best_d = pose.k, here
        for k in order:
            _, d = self._forward(pose.x, pose.y, k)
            if d < best_d - 1e-9:
                best_k, best_d = k, d
        if best_d < here:
            return best_k
        # plateau of the cell-resolution field: look two forward steps ahead
        for k in order:
            nxt, _ = self._forward(pose.x, pose.y, k)
            if (nxt.x, nxt.y) == (pose.x, pose.y):
                continue
            for k2 in range(N_HEADINGS):
                _, d2 = self._forward(nxt.x, nxt.y, k2)
                if d2 < best_d - 1e-9:
                    best_k, best_d = k, d2
        return best_k

    def __call__(self, obs) -> int:
        k = self._best_heading()
        dk = (k - self.env.pose.k) % N_HEADINGS
        if dk == 0:
            return Action.FORWARD
        return Action.TURN_LEFT if dk <= N_HEADINGS // 2 else Action.TURN_RIGHT

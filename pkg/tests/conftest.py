from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wpnav.agent import PpoConfig, PpoTrainer
from wpnav.curriculum import CurriculumSchedule
from wpnav.environment import EpisodeSpec, Pose, SensorConfig, _COS, _SIN
from wpnav.grid import OccupancyGrid, generate_map, read_map
from wpnav.perception import MEAN_MU, TwinVae

FIXTURES = Path(__file__).parent / "fixtures"

settings.register_profile("wpnav", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("wpnav")

# criterion number -> PASS/FAIL line, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


def open_grid(h: int = 40, w: int = 40, cell_size: float = 0.1) -> OccupancyGrid:
    """Empty room with only the border walls."""
    return OccupancyGrid(np.zeros((h, w), dtype=bool), cell_size=cell_size)


@pytest.fixture(scope="session")
def corridor_map() -> OccupancyGrid:
    return read_map(FIXTURES / "corridor.txt")


@pytest.fixture(scope="session")
def corridor_path() -> Path:
    return FIXTURES / "corridor.txt"


@pytest.fixture(scope="session")
def rooms_map() -> OccupancyGrid:
    return generate_map("rooms", 32, 0)


@pytest.fixture(scope="session")
def maze_map() -> OccupancyGrid:
    return generate_map("maze", 32, 0)


@pytest.fixture
def open_map() -> OccupancyGrid:
    return open_grid()


def tiny_vae(seed: int = 0) -> TwinVae:
    """Small encoder marked trained; enough for policy plumbing tests."""
    vae = TwinVae(SensorConfig(num_rays=8, patch_size=4), n_z=2, hidden=(8, 4), seed=seed)
    vae.trained = True
    return vae


def goal_ahead(grid: OccupancyGrid, rng, episode_id: int, margin: int = 8) -> EpisodeSpec:
    """Random start with the goal 0.5 m straight ahead; resamples until both ends are free."""
    h, w = grid.blocked.shape
    while True:
        r, c = rng.integers(margin, h - margin), rng.integers(margin, w - margin)
        k = int(rng.integers(36))
        x, y = (c + 0.5) * grid.cell_size, (r + 0.5) * grid.cell_size
        goal = (float(x + 0.5 * _COS[k]), float(y + 0.5 * _SIN[k]))
        if grid.is_free(x, y) and grid.is_free(*goal):
            return EpisodeSpec(Pose(float(x), float(y), k), goal, 0.5, max_steps=60, episode_id=episode_id)


@pytest.fixture(scope="session")
def goal_ahead_training():
    """PPO on an empty room with the goal 0.5 m ahead, 2000 episodes; (trainer, best rolling success)."""
    grid = open_grid(40, 40)
    tr = PpoTrainer(grid, tiny_vae(), CurriculumSchedule(), PpoConfig(num_envs=8, horizon=256),
                    seed=0, encode_mode=MEAN_MU, episode_source=lambda rng, ep: goal_ahead(grid, rng, ep))
    best = 0.0

    def watch(t):
        nonlocal best
        if len(t.result.logs) >= 100:
            best = max(best, float(np.mean([e.success for e in t.result.logs[-100:]])))

    tr.train(total_episodes=2000, on_update=watch)
    return tr, best

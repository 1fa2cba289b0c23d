"""A* paths and Dijkstra distance fields on the inflated grid.

Path costs are carried as exact move counts ``(straight, diagonal)``; the
metric length is ``(straight + diagonal * sqrt(2)) * cell_size``. Because
sqrt(2) is irrational, two costs are equal iff their move counts are equal,
which lets tests compare planners exactly.
"""
from __future__ import annotations

import heapq
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import BlockedEndpoint, InvalidFraction, InvalidN, NoPath
from .grid import OccupancyGrid

SQRT2 = math.sqrt(2.0)

# Number of waypoint-producing planner calls (astar / extract_waypoints /
# point_at_fraction). Evaluation asserts this stays flat.
CALLS: Counter = Counter()

_MOVES = (
    (-1, 0, False), (1, 0, False), (0, -1, False), (0, 1, False),
    (-1, -1, True), (-1, 1, True), (1, -1, True), (1, 1, True),
)


def neighbors(blocked: np.ndarray, row: int, col: int):
    """8-connected moves out of (row, col) as (row, col, is_diagonal).

    A diagonal is forbidden only when both flanking orthogonal cells are blocked.
    """
    h, w = blocked.shape
    for dr, dc, diag in _MOVES:
        r, c = row + dr, col + dc
        if not (0 <= r < h and 0 <= c < w) or blocked[r, c]:
            continue
        if diag and blocked[row + dr, col] and blocked[row, col + dc]:
            continue
        yield r, c, diag


def octile(a: tuple[int, int], b: tuple[int, int]) -> float:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    lo, hi = min(dr, dc), max(dr, dc)
    return (hi - lo) + SQRT2 * lo


@dataclass(frozen=True)
class PlannedPath:
    cells: tuple
    points: np.ndarray        # (k, 2) metric cell centers
    arc_length: np.ndarray    # (k,) cumulative meters, arc_length[0] == 0
    total_length: float
    moves: tuple[int, int]    # (straight, diagonal)

    @property
    def start(self) -> tuple[float, float]:
        return float(self.points[0, 0]), float(self.points[0, 1])

    @property
    def goal(self) -> tuple[float, float]:
        return float(self.points[-1, 0]), float(self.points[-1, 1])

    def to_text(self) -> str:
        return "".join(f"{float(x)!r} {float(y)!r}\n" for x, y in self.points)


def _endpoint(grid: OccupancyGrid, xy) -> tuple[int, int]:
    r, c = grid.cell_of(*xy)
    if not grid.in_bounds(r, c) or grid.blocked[r, c]:
        raise BlockedEndpoint(f"point {tuple(xy)} lies in blocked cell ({r}, {c})")
    return r, c


def _build_path(grid: OccupancyGrid, cells: list[tuple[int, int]]) -> PlannedPath:
    pts = np.array([grid.center(r, c) for r, c in cells], dtype=float)
    straight = diag = 0
    arc = [0.0]
    for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
        if r0 != r1 and c0 != c1:
            diag += 1
        else:
            straight += 1
        arc.append((straight + SQRT2 * diag) * grid.cell_size)
    arc = np.array(arc)
    return PlannedPath(tuple(cells), pts, arc, float(arc[-1]), (straight, diag))


def astar(grid: OccupancyGrid, start, goal) -> PlannedPath:
    """Minimum-cost 8-connected path between the cells containing ``start`` and ``goal``.

    Ties on f are broken by lower heuristic, then row-major cell order.
    """
    CALLS["astar"] += 1
    s = _endpoint(grid, start)
    g = _endpoint(grid, goal)
    blocked = grid.blocked
    best = {s: (0, 0)}
    parent = {s: None}
    closed = set()
    heap = [(octile(s, g), octile(s, g), s[0], s[1])]
    while heap:
        _, _, r, c = heapq.heappop(heap)
        cur = (r, c)
        if cur in closed:
            continue
        closed.add(cur)
        if cur == g:
            cells = []
            node = g
            while node is not None:
                cells.append(node)
                node = parent[node]
            return _build_path(grid, cells[::-1])
        a, b = best[cur]
        for nr, nc, diag in neighbors(blocked, r, c):
            nxt = (nr, nc)
            if nxt in closed:
                continue
            cand = (a, b + 1) if diag else (a + 1, b)
            cost = cand[0] + SQRT2 * cand[1]
            old = best.get(nxt)
            if old is None or cost < old[0] + SQRT2 * old[1] - 1e-9:
                best[nxt] = cand
                parent[nxt] = cur
                h = octile(nxt, g)
                heapq.heappush(heap, (cost + h, h, nr, nc))
    raise NoPath(f"no path from cell {s} to cell {g}")


class DistanceField:
    """Exact geodesic distance (meters) from every free cell to the source cell."""

    def __init__(self, grid: OccupancyGrid, source):
        self.grid = grid
        self.source = (float(source[0]), float(source[1]))
        src = _endpoint(grid, source)
        self.source_cell = src
        h, w = grid.blocked.shape
        straight = np.full((h, w), -1, dtype=np.int64)
        diag = np.full((h, w), -1, dtype=np.int64)
        straight[src] = diag[src] = 0
        done = np.zeros((h, w), dtype=bool)
        heap = [(0.0, src[0], src[1])]
        blocked = grid.blocked
        while heap:
            _, r, c = heapq.heappop(heap)
            if done[r, c]:
                continue
            done[r, c] = True
            a, b = int(straight[r, c]), int(diag[r, c])
            for nr, nc, d in neighbors(blocked, r, c):
                if done[nr, nc]:
                    continue
                na, nb = (a, b + 1) if d else (a + 1, b)
                cost = na + SQRT2 * nb
                if straight[nr, nc] < 0 or cost < straight[nr, nc] + SQRT2 * diag[nr, nc] - 1e-9:
                    straight[nr, nc], diag[nr, nc] = na, nb
                    heapq.heappush(heap, (cost, nr, nc))
        dist = np.where(straight >= 0, (straight + SQRT2 * diag) * grid.cell_size, np.inf)
        dist.setflags(write=False)
        self.dist = dist
        self.moves_straight = straight
        self.moves_diag = diag

    def query(self, x: float, y: float) -> float:
        """Nearest-cell lookup: distance stored for the cell containing (x, y)."""
        r, c = self.grid.cell_of(x, y)
        if not self.grid.in_bounds(r, c):
            return math.inf
        return float(self.dist[r, c])


def distance_field(grid: OccupancyGrid, source) -> DistanceField:
    return DistanceField(grid, source)


class FieldCache:
    """Distance fields memoized by source cell. Fields are immutable once built."""

    def __init__(self, grid: OccupancyGrid):
        self.grid = grid
        self._fields: dict[tuple[int, int], DistanceField] = {}

    def get(self, xy) -> DistanceField:
        key = self.grid.cell_of(*xy)
        field = self._fields.get(key)
        if field is None:
            field = DistanceField(self.grid, self.grid.center(*key))
            self._fields[key] = field
        return field

    def geodesic(self, a, b) -> float:
        """Geodesic meters from point ``a`` to point ``b`` (field rooted at ``b``)."""
        return self.get(b).query(*a)


def point_at_arc_length(path: PlannedPath, s: float) -> tuple[float, float]:
    if s >= path.total_length:
        return path.goal
    if s <= 0.0:
        return path.start
    i = int(np.searchsorted(path.arc_length, s, side="right")) - 1
    s0, s1 = path.arc_length[i], path.arc_length[i + 1]
    u = (s - s0) / (s1 - s0)
    p0, p1 = path.points[i], path.points[i + 1]
    return float(p0[0] + u * (p1[0] - p0[0])), float(p0[1] + u * (p1[1] - p0[1]))


def extract_waypoints(path: PlannedPath, n: int) -> list[tuple[float, float]]:
    """``n`` equidistant points along the path; the last is the path endpoint."""
    CALLS["extract_waypoints"] += 1
    if n < 1:
        raise InvalidN(f"number of waypoints must be >= 1, got {n}")
    return [point_at_arc_length(path, k / n * path.total_length) for k in range(1, n + 1)]


def point_at_fraction(path: PlannedPath, f: float) -> tuple[float, float]:
    CALLS["point_at_fraction"] += 1
    if not (0.0 < f <= 1.0):
        raise InvalidFraction(f"fraction must be in (0, 1], got {f}")
    return point_at_arc_length(path, f * path.total_length)


def off_corner(path: PlannedPath, point, eps: float = 1e-6) -> tuple[float, float]:
    """Move a point sitting on the corner crossed by a diagonal move ``eps`` further along the path.

    That corner is shared by four cells and the two flanking ones may be blocked,
    so a goal placed there has no free cell of its own.
    """
    x, y = point
    for i in range(len(path.cells) - 1):
        (r0, c0), (r1, c1) = path.cells[i], path.cells[i + 1]
        if r0 == r1 or c0 == c1:
            continue
        a, b = path.points[i], path.points[i + 1]
        mid = 0.5 * (a + b)
        if abs(x - mid[0]) < 1e-9 and abs(y - mid[1]) < 1e-9:
            d = (b - a) / np.linalg.norm(b - a)
            return float(mid[0] + eps * d[0]), float(mid[1] + eps * d[1])
    return float(x), float(y)

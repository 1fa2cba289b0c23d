"""Occupancy grids, map files and seeded map generation.

Coordinates: cell ``(row, col)`` covers ``x in [col*cs, (col+1)*cs)`` and
``y in [row*cs, (row+1)*cs)``. Row 0 is the first map line after the header.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import MalformedMap

OCCUPIED = "#"
FREE = "."


def _inflation_offsets(cell_size: float, radius: float) -> list[tuple[int, int]]:
    """Offsets (dr, dc) of cells whose center lies within ``radius`` of the origin cell's square."""
    reach = int(math.ceil(radius / cell_size)) + 1
    offsets = []
    for dr in range(-reach, reach + 1):
        for dc in range(-reach, reach + 1):
            gx = max(0.0, abs(dc) - 0.5) * cell_size
            gy = max(0.0, abs(dr) - 0.5) * cell_size
            if math.hypot(gx, gy) <= radius + 1e-12:
                offsets.append((dr, dc))
    return offsets


def inflate(cells: np.ndarray, cell_size: float, radius: float) -> np.ndarray:
    """Cells that have an occupied cell within ``radius`` of their center."""
    h, w = cells.shape
    out = cells.copy()
    for dr, dc in _inflation_offsets(cell_size, radius):
        if dr == 0 and dc == 0:
            continue
        # blocked[r, c] |= cells[r + dr, c + dc]
        src = cells[max(0, dr):h + min(0, dr), max(0, dc):w + min(0, dc)]
        out[max(0, -dr):h + min(0, -dr), max(0, -dc):w + min(0, -dc)] |= src
    return out


class OccupancyGrid:
    """Raw occupancy plus the inflated (agent-radius) view used for motion and planning."""

    def __init__(self, cells, cell_size: float = 0.1, inflation_radius: float = 0.1):
        cells = np.array(cells, dtype=bool)
        if cells.ndim != 2 or cells.shape[0] < 3 or cells.shape[1] < 3:
            raise MalformedMap(f"grid must be at least 3x3, got shape {cells.shape}")
        if not cell_size > 0:
            raise MalformedMap(f"cell_size must be positive, got {cell_size}")
        cells[0, :] = cells[-1, :] = True
        cells[:, 0] = cells[:, -1] = True
        cells.setflags(write=False)
        self.cells = cells
        self.cell_size = float(cell_size)
        self.inflation_radius = float(inflation_radius)
        blocked = inflate(cells, self.cell_size, self.inflation_radius)
        blocked.setflags(write=False)
        self.blocked = blocked

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def __repr__(self):
        return (f"OccupancyGrid({self.height}x{self.width}, cell_size={self.cell_size}, "
                f"free={int((~self.blocked).sum())})")

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(y / self.cell_size)), int(math.floor(x / self.cell_size))

    def center(self, row: int, col: int) -> tuple[float, float]:
        return float((col + 0.5) * self.cell_size), float((row + 0.5) * self.cell_size)

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    def is_free(self, x: float, y: float) -> bool:
        """True if (x, y) lies in a non-blocked cell of the inflated grid."""
        r, c = self.cell_of(x, y)
        return self.in_bounds(r, c) and not self.blocked[r, c]

    def free_cells(self) -> np.ndarray:
        """(k, 2) array of free (row, col) pairs of the inflated grid, row-major."""
        return np.argwhere(~self.blocked)

    def to_text(self) -> str:
        lines = [f"cellsize {self.cell_size!r}"]
        for row in self.cells:
            lines.append("".join(OCCUPIED if v else FREE for v in row))
        return "\n".join(lines) + "\n"

    def map_hash(self) -> str:
        """Stable identity of the map: sha256 over the canonical text form."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def load_map(text: str, inflation_radius: float = 0.1) -> OccupancyGrid:
    lines = [ln.rstrip("\r") for ln in text.split("\n")]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise MalformedMap("empty map")
    header = lines[0].split()
    if len(header) != 2 or header[0] != "cellsize":
        raise MalformedMap(f"missing 'cellsize <meters>' header, got {lines[0]!r}")
    try:
        cell_size = float(header[1])
    except ValueError:
        raise MalformedMap(f"bad cellsize value {header[1]!r}") from None
    if not (math.isfinite(cell_size) and cell_size > 0):
        raise MalformedMap(f"cellsize must be positive, got {cell_size}")
    rows = lines[1:]
    if not rows:
        raise MalformedMap("map has no rows")
    width = len(rows[0])
    cells = np.zeros((len(rows), width), dtype=bool)
    for r, line in enumerate(rows):
        if len(line) != width:
            raise MalformedMap(f"row {r} has length {len(line)}, expected {width}")
        for c, ch in enumerate(line):
            if ch == OCCUPIED:
                cells[r, c] = True
            elif ch != FREE:
                raise MalformedMap(f"unknown glyph {ch!r} at row {r}, col {c}")
    return OccupancyGrid(cells, cell_size=cell_size, inflation_radius=inflation_radius)


def read_map(path, inflation_radius: float = 0.1) -> OccupancyGrid:
    with open(path, encoding="utf-8") as fh:
        return load_map(fh.read(), inflation_radius=inflation_radius)


def _largest_component(free: np.ndarray) -> np.ndarray:
    """Mask of the largest 8-connected component of ``free`` cells."""
    from scipy import ndimage

    labels, n = ndimage.label(free, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return free
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def generate_rooms(size: int = 32, seed: int = 0, cell_size: float = 0.1,
                   min_room: int = 9, door: int = 6) -> OccupancyGrid:
    """Rooms-and-corridors map by recursive division.

    Walls are one cell thick; every wall gets one doorway of ``door`` cells so
    the free space stays connected after inflation.
    """
    rng = np.random.default_rng(seed)
    cells = np.zeros((size, size), dtype=bool)
    cells[0, :] = cells[-1, :] = True
    cells[:, 0] = cells[:, -1] = True

    def divide(r0, r1, c0, c1):
        # interior region rows r0..r1-1, cols c0..c1-1; a new wall must not
        # touch a doorway in the enclosing walls (2-cell margin for inflation)
        h, w = r1 - r0, c1 - c0
        rows = [r for r in range(r0 + min_room, r1 - min_room)
                if cells[max(0, r - 2):r + 3, [c0 - 1, c1]].all()]
        cols = [c for c in range(c0 + min_room, c1 - min_room)
                if cells[[r0 - 1, r1], max(0, c - 2):c + 3].all()]
        if not (rows or cols):
            return
        horizontal = bool(rows) and (not cols or h > w or (h == w and rng.random() < 0.5))
        if horizontal:
            wr = rows[int(rng.integers(len(rows)))]
            cells[wr, c0:c1] = True
            width = min(door, w - 2)
            d0 = int(rng.integers(c0 + 1, c1 - width))
            cells[wr, d0:d0 + width] = False
            divide(r0, wr, c0, c1)
            divide(wr + 1, r1, c0, c1)
        else:
            wc = cols[int(rng.integers(len(cols)))]
            cells[r0:r1, wc] = True
            height = min(door, h - 2)
            d0 = int(rng.integers(r0 + 1, r1 - height))
            cells[d0:d0 + height, wc] = False
            divide(r0, r1, c0, wc)
            divide(r0, r1, wc + 1, c1)

    divide(1, size - 1, 1, size - 1)
    grid = OccupancyGrid(cells, cell_size=cell_size)
    return _seal_unreachable(grid)


def generate_maze(size: int = 32, seed: int = 0, cell_size: float = 0.1,
                  corridor: int = 5) -> OccupancyGrid:
    """Perfect maze (randomized depth-first carving) with ``corridor``-cell passages."""
    rng = np.random.default_rng(seed)
    pitch = corridor + 1
    n = (size - 1) // pitch
    if n < 1:
        raise MalformedMap(f"size {size} too small for corridor width {corridor}")
    cells = np.ones((size, size), dtype=bool)
    for i in range(n):
        for j in range(n):
            r, c = 1 + i * pitch, 1 + j * pitch
            cells[r:r + corridor, c:c + corridor] = False
    seen = np.zeros((n, n), dtype=bool)
    stack = [(0, 0)]
    seen[0, 0] = True
    while stack:
        i, j = stack[-1]
        nbrs = [(i + di, j + dj) for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if 0 <= i + di < n and 0 <= j + dj < n and not seen[i + di, j + dj]]
        if not nbrs:
            stack.pop()
            continue
        ni, nj = nbrs[int(rng.integers(len(nbrs)))]
        seen[ni, nj] = True
        r, c = 1 + min(i, ni) * pitch, 1 + min(j, nj) * pitch
        if ni != i:
            cells[r + corridor, c:c + corridor] = False
        else:
            cells[r:r + corridor, c + corridor] = False
        stack.append((ni, nj))
    return _seal_unreachable(OccupancyGrid(cells, cell_size=cell_size))


def _seal_unreachable(grid: OccupancyGrid) -> OccupancyGrid:
    """Mark raw cells outside the largest free component occupied, so every free cell is reachable."""
    keep = _largest_component(~grid.blocked)
    cells = np.array(grid.cells)
    cells[~grid.blocked & ~keep] = True
    return OccupancyGrid(cells, cell_size=grid.cell_size, inflation_radius=grid.inflation_radius)


def generate_map(kind: str = "rooms", size: int = 32, seed: int = 0,
                 cell_size: float = 0.1) -> OccupancyGrid:
    if kind == "rooms":
        return generate_rooms(size=size, seed=seed, cell_size=cell_size)
    if kind == "maze":
        return generate_maze(size=size, seed=seed, cell_size=cell_size)
    raise ValueError(f"unknown map kind {kind!r}")


def random_grid(rng: np.random.Generator, size: int = 32, density: float = 0.25,
                cell_size: float = 0.1, inflation_radius: float = 0.0) -> OccupancyGrid:
    """Uniform random obstacle field; used by property tests."""
    cells = rng.random((size, size)) < density
    return OccupancyGrid(cells, cell_size=cell_size, inflation_radius=inflation_radius)

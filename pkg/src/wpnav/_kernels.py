"""Grid traversal kernels (Amanatides-Woo DDA), compiled with numba.

Both kernels work in cell units internally; positions come in meters.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _cast_one(occ, cs, x, y, dx, dy, max_range):
    h, w = occ.shape
    gx = x / cs
    gy = y / cs
    col = int(math.floor(gx))
    row = int(math.floor(gy))
    if dx > 0.0:
        step_c = 1
        t_max_x = (col + 1 - gx) / dx
        t_dx = 1.0 / dx
    elif dx < 0.0:
        step_c = -1
        t_max_x = (gx - col) / -dx
        t_dx = -1.0 / dx
    else:
        step_c = 0
        t_max_x = np.inf
        t_dx = np.inf
    if dy > 0.0:
        step_r = 1
        t_max_y = (row + 1 - gy) / dy
        t_dy = 1.0 / dy
    elif dy < 0.0:
        step_r = -1
        t_max_y = (gy - row) / -dy
        t_dy = -1.0 / dy
    else:
        step_r = 0
        t_max_y = np.inf
        t_dy = np.inf
    limit = max_range / cs
    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            t_max_x += t_dx
            col += step_c
        else:
            t = t_max_y
            t_max_y += t_dy
            row += step_r
        if t >= limit:
            return max_range
        if row < 0 or row >= h or col < 0 or col >= w or occ[row, col]:
            return t * cs


@njit(cache=True)
def cast_rays(occ, cs, x, y, angles, max_range, out):
    """Distance along each ray to the first occupied cell boundary, capped at ``max_range``."""
    for i in range(angles.shape[0]):
        out[i] = _cast_one(occ, cs, x, y, math.cos(angles[i]), math.sin(angles[i]), max_range)
    return out


@njit(cache=True)
def segment_blocked(blocked, cs, x0, y0, x1, y1):
    """True if the segment (x0, y0)-(x1, y1) touches any blocked cell.

    Where the segment passes exactly through a cell corner both flanking cells
    are tested, so the check is conservative.
    """
    h, w = blocked.shape
    gx0 = x0 / cs
    gy0 = y0 / cs
    gx1 = x1 / cs
    gy1 = y1 / cs
    col = int(math.floor(gx0))
    row = int(math.floor(gy0))
    end_col = int(math.floor(gx1))
    end_row = int(math.floor(gy1))
    if row < 0 or row >= h or col < 0 or col >= w or blocked[row, col]:
        return True
    if end_row < 0 or end_row >= h or end_col < 0 or end_col >= w or blocked[end_row, end_col]:
        return True
    dx = gx1 - gx0
    dy = gy1 - gy0
    if dx > 0.0:
        step_c = 1
        t_max_x = (col + 1 - gx0) / dx
        t_dx = 1.0 / dx
    elif dx < 0.0:
        step_c = -1
        t_max_x = (gx0 - col) / -dx
        t_dx = -1.0 / dx
    else:
        step_c = 0
        t_max_x = np.inf
        t_dx = np.inf
    if dy > 0.0:
        step_r = 1
        t_max_y = (row + 1 - gy0) / dy
        t_dy = 1.0 / dy
    elif dy < 0.0:
        step_r = -1
        t_max_y = (gy0 - row) / -dy
        t_dy = -1.0 / dy
    else:
        step_r = 0
        t_max_y = np.inf
        t_dy = np.inf
    while True:
        t_next = min(t_max_x, t_max_y)
        if t_next > 1.0:
            return False
        if abs(t_max_x - t_max_y) < 1e-12:
            # corner crossing: both side cells are touched
            r_side = row + step_r
            c_side = col + step_c
            if r_side < 0 or r_side >= h or blocked[r_side, col]:
                return True
            if c_side < 0 or c_side >= w or blocked[row, c_side]:
                return True
            row = r_side
            col = c_side
            t_max_x += t_dx
            t_max_y += t_dy
        elif t_max_x < t_max_y:
            col += step_c
            t_max_x += t_dx
        else:
            row += step_r
            t_max_y += t_dy
        if row < 0 or row >= h or col < 0 or col >= w or blocked[row, col]:
            return True

"""Compiled grid geometry kernels.

Cells are closed unit squares ``[c, c+1] x [r, r+1]`` grown by ``EPS`` on
every side; a segment covers a cell when it touches that grown square.
This is the supercover: a segment through a cell corner covers both side
cells, so nothing is seen or traversed through a diagonal gap.

Arrays are indexed ``[row, col]``; points are ``(x, y) = (col, row)`` in
cell units.
"""

import math

import numpy as np
from numba import njit

EPS = 1e-9
TIE = 1e-9

FREE = 0
OCCUPIED = 1
UNKNOWN = -1

HIT_OBSTACLE = 0
HIT_MAX_RANGE = 1
HIT_BOUNDARY = 2


@njit(cache=True)
def segment_buffer_size(x0, y0, x1, y1):
    return 4 * (int(abs(x1 - x0)) + int(abs(y1 - y0))) + 32


@njit(cache=True)
def segment_cells(x0, y0, x1, y1, out_c, out_r, out_t):
    """Fill the supercover cells of a segment with their entry distance.

    Returns the number of cells written. Cells are grouped by column and
    are not sorted; ``out_t`` holds the distance from ``(x0, y0)`` at which
    the segment first touches each cell.
    """
    dx = x1 - x0
    dy = y1 - y0
    length = math.sqrt(dx * dx + dy * dy)
    if length > 0.0:
        ux = dx / length
        uy = dy / length
    else:
        ux = 0.0
        uy = 0.0
    n = 0
    cmin = math.ceil(min(x0, x1) - EPS) - 1
    cmax = math.floor(max(x0, x1) + EPS)
    for c in range(cmin, cmax + 1):
        if ux == 0.0:
            if x0 < c - EPS or x0 > c + 1 + EPS:
                continue
            ta = 0.0
            tb = length
        else:
            t1 = (c - EPS - x0) / ux
            t2 = (c + 1 + EPS - x0) / ux
            ta = max(min(t1, t2), 0.0)
            tb = min(max(t1, t2), length)
            if ta > tb:
                continue
        ya = y0 + uy * ta
        yb = y0 + uy * tb
        ylo = min(ya, yb)
        yhi = max(ya, yb)
        rmin = math.ceil(ylo - EPS) - 1
        rmax = math.floor(yhi + EPS)
        for r in range(rmin, rmax + 1):
            if uy > 0.0:
                ty = (r - EPS - y0) / uy
            elif uy < 0.0:
                ty = (r + 1 + EPS - y0) / uy
            else:
                ty = 0.0
            out_c[n] = c
            out_r[n] = r
            out_t[n] = max(ta, ty, 0.0)
            n += 1
    return n


@njit(cache=True)
def line_of_sight(known, x0, y0, x1, y1):
    """True iff every supercover cell of the segment is known-free."""
    h, w = known.shape
    dx = x1 - x0
    dy = y1 - y0
    length = math.sqrt(dx * dx + dy * dy)
    if length > 0.0:
        ux = dx / length
        uy = dy / length
    else:
        ux = 0.0
        uy = 0.0
    cmin = math.ceil(min(x0, x1) - EPS) - 1
    cmax = math.floor(max(x0, x1) + EPS)
    for c in range(cmin, cmax + 1):
        if ux == 0.0:
            if x0 < c - EPS or x0 > c + 1 + EPS:
                continue
            ta = 0.0
            tb = length
        else:
            t1 = (c - EPS - x0) / ux
            t2 = (c + 1 + EPS - x0) / ux
            ta = max(min(t1, t2), 0.0)
            tb = min(max(t1, t2), length)
            if ta > tb:
                continue
        if c < 0 or c >= w:
            return False
        ya = y0 + uy * ta
        yb = y0 + uy * tb
        rmin = math.ceil(min(ya, yb) - EPS) - 1
        rmax = math.floor(max(ya, yb) + EPS)
        if rmin < 0 or rmax >= h:
            return False
        for r in range(rmin, rmax + 1):
            if known[r, c] != FREE:
                return False
    return True


@njit(cache=True)
def raycast(truth, x0, y0, angle, max_range, out_c, out_r):
    """Cast one ray through a ground-truth grid (0 free, 1 obstacle).

    Writes the traversed in-map cells in order of entry and returns
    ``(count, hit_kind)``. Every obstacle touched at the instant of the
    first hit is reported, after all earlier cells.
    """
    h, w = truth.shape
    x1 = x0 + max_range * math.cos(angle)
    y1 = y0 + max_range * math.sin(angle)
    size = segment_buffer_size(x0, y0, x1, y1)
    bc = np.empty(size, np.int64)
    br = np.empty(size, np.int64)
    bt = np.empty(size, np.float64)
    n = segment_cells(x0, y0, x1, y1, bc, br, bt)
    t_obs = np.inf
    t_bnd = np.inf
    for i in range(n):
        c = bc[i]
        r = br[i]
        if c < 0 or c >= w or r < 0 or r >= h:
            if bt[i] < t_bnd:
                t_bnd = bt[i]
        elif truth[r, c] != 0:
            if bt[i] < t_obs:
                t_obs = bt[i]
    if t_obs < np.inf and t_obs <= t_bnd + TIE:
        kind = HIT_OBSTACLE
        cut = t_obs
    elif t_bnd < np.inf:
        kind = HIT_BOUNDARY
        cut = t_bnd
    else:
        kind = HIT_MAX_RANGE
        cut = np.inf
    order = np.argsort(bt[:n], kind="mergesort")
    m = 0
    # strictly before the cut
    for j in range(n):
        i = order[j]
        c = bc[i]
        r = br[i]
        if c < 0 or c >= w or r < 0 or r >= h:
            continue
        if kind == HIT_OBSTACLE:
            if bt[i] < cut - TIE:
                out_c[m] = c
                out_r[m] = r
                m += 1
        elif kind == HIT_BOUNDARY:
            if bt[i] <= cut + TIE:
                out_c[m] = c
                out_r[m] = r
                m += 1
        else:
            out_c[m] = c
            out_r[m] = r
            m += 1
    if kind == HIT_OBSTACLE:
        # obstacles touched at the hit instant; free cells tied with them
        # are only grazed at a corner and stay unseen
        for j in range(n):
            i = order[j]
            c = bc[i]
            r = br[i]
            if c < 0 or c >= w or r < 0 or r >= h:
                continue
            if abs(bt[i] - cut) <= TIE and truth[r, c] != 0:
                out_c[m] = c
                out_r[m] = r
                m += 1
    return m, kind


@njit(cache=True)
def sense(known, truth, x0, y0, max_range, ray_count):
    """360-degree sweep; returns the number of cells that left unknown."""
    size = segment_buffer_size(0.0, 0.0, max_range, max_range) + 8
    oc = np.empty(size, np.int64)
    orr = np.empty(size, np.int64)
    newly = 0
    for k in range(ray_count):
        angle = 2.0 * math.pi * k / ray_count
        m, kind = raycast(truth, x0, y0, angle, max_range, oc, orr)
        for j in range(m):
            r = orr[j]
            c = oc[j]
            if known[r, c] == UNKNOWN:
                if truth[r, c] == 0:
                    known[r, c] = FREE
                else:
                    known[r, c] = OCCUPIED
                newly += 1
    return newly


@njit(cache=True)
def utilities(known, node_xy, frontier_xy, d_s, todo, out):
    """Observable-frontier counts for the nodes flagged in ``todo``."""
    lim = d_s + 1e-9
    for i in range(node_xy.shape[0]):
        if not todo[i]:
            continue
        x = node_xy[i, 0]
        y = node_xy[i, 1]
        cnt = 0
        for j in range(frontier_xy.shape[0]):
            fx = frontier_xy[j, 0]
            fy = frontier_xy[j, 1]
            ddx = fx - x
            ddy = fy - y
            if ddx * ddx + ddy * ddy > lim * lim:
                continue
            if line_of_sight(known, x, y, fx, fy):
                cnt += 1
        out[i] = cnt


@njit(cache=True)
def edges_clear(known, pts, ei, ej):
    res = np.zeros(ei.shape[0], np.bool_)
    for e in range(ei.shape[0]):
        a = ei[e]
        b = ej[e]
        res[e] = line_of_sight(known, pts[a, 0], pts[a, 1], pts[b, 0], pts[b, 1])
    return res

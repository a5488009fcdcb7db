"""Independent reference implementations used only by the tests."""
from __future__ import annotations

import math
from collections import deque

import numpy as np


def count_components(mask: np.ndarray) -> int:
    """Number of four-connected foreground components (plain BFS)."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    count = 0
    for i in range(h):
        for j in range(w):
            if mask[i, j] and not seen[i, j]:
                count += 1
                queue = deque([(i, j)])
                seen[i, j] = True
                while queue:
                    a, b = queue.popleft()
                    for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        na, nb = a + da, b + db
                        if 0 <= na < h and 0 <= nb < w and mask[na, nb] and not seen[na, nb]:
                            seen[na, nb] = True
                            queue.append((na, nb))
    return count


def raster_point_in_rect(vehicles, grid_size: int, cell_size: float) -> np.ndarray:
    """Cell-by-cell point-in-rectangle test on cell centres."""
    half = grid_size * cell_size / 2
    out = np.zeros((grid_size, grid_size), dtype=np.int64)
    for i in range(grid_size):
        for j in range(grid_size):
            px = -half + (j + 0.5) * cell_size
            py = -half + (i + 0.5) * cell_size
            for cx, cy, length, width, yaw, cls in vehicles:
                dx, dy = px - cx, py - cy
                u = dx * math.cos(yaw) + dy * math.sin(yaw)
                v = -dx * math.sin(yaw) + dy * math.cos(yaw)
                if abs(u) <= length / 2 and abs(v) <= width / 2:
                    out[i, j] = int(cls)
    return out


def _segment_box_overlap(ox, oy, dx, dy, x0, y0):
    """Positive-length overlap of segment o + t d (t in [0, 1]) with unit boxes at (x0, y0)."""
    lo = np.zeros_like(x0, dtype=np.float64)
    hi = np.ones_like(x0, dtype=np.float64)
    ok = np.ones_like(x0, dtype=bool)
    for p, d, b0 in ((ox, dx, x0), (oy, dy, y0)):
        if d == 0.0:
            ok &= (p > b0) & (p < b0 + 1)
        else:
            t1 = (b0 - p) / d
            t2 = (b0 + 1 - p) / d
            lo = np.maximum(lo, np.minimum(t1, t2))
            hi = np.minimum(hi, np.maximum(t1, t2))
    return ok & (hi > lo)


def visibility_bruteforce(occupied, pose, cell_size, fov_deg, range_m):
    """For every cell, test every occupied cell for blocking via exact segment clipping."""
    h, w = occupied.shape
    half = w * cell_size / 2
    ox = (pose[0] + half) / cell_size
    oy = (pose[1] + half) / cell_size
    own = (int(math.floor(oy)), int(math.floor(ox)))
    occ_i, occ_j = np.nonzero(occupied)
    vis = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            dx, dy = j + 0.5 - ox, i + 0.5 - oy
            if math.hypot(dx, dy) * cell_size > range_m:
                continue
            if fov_deg < 360:
                bearing = math.atan2(dy, dx) - pose[2]
                bearing = (bearing + math.pi) % (2 * math.pi) - math.pi
                if abs(bearing) > math.radians(fov_deg) / 2:
                    continue
            keep = ~(((occ_i == i) & (occ_j == j)) | ((occ_i == own[0]) & (occ_j == own[1])))
            ci, cj = occ_i[keep], occ_j[keep]
            crosses = _segment_box_overlap(ox, oy, dx, dy, cj.astype(float), ci.astype(float))
            proj = ((cj + 0.5 - ox) * dx + (ci + 0.5 - oy) * dy) / (dx * dx + dy * dy)
            vis[i, j] = not np.any(crosses & (proj < 1.0))
    return vis


def ece_bruteforce(conf, correct, m_bins):
    """Explicit loop over bins and samples."""
    n = len(conf)
    total = 0.0
    for m in range(m_bins):
        lo, hi = m / m_bins, (m + 1) / m_bins
        members = []
        for c, a in zip(conf, correct):
            inside = lo <= c < hi or (m == m_bins - 1 and c == 1.0)
            if inside:
                members.append((c, a))
        if members:
            acc = sum(a for _, a in members) / len(members)
            cf = sum(c for c, _ in members) / len(members)
            total += len(members) / n * abs(acc - cf)
    return total


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up = x.copy()
        down = x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (f(up) - f(down)) / (2 * h)
    return grad

"""Nearest-neighbour densification of sparse tracks into coarse flow and visibility.

Every coarse cell takes the displacement and target visibility of the closest
track visible in the source frame. Cell (i, j) is centred on its P x P patch:
``(P*(j+0.5) - 0.5, P*(i+0.5) - 0.5)`` in pixel-centre coordinates. Ties go
to the lowest track index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import NoVisibleTracksError, TrackSet


@dataclass(frozen=True)
class CoarseEstimate:
    flow0: np.ndarray  # [H/P, W/P, 2] float32, pixel units
    mask0: np.ndarray  # [H/P, W/P] float32 in {0, 1}
    P: int
    nearest: np.ndarray  # [H/P, W/P] track index used by each cell

    @property
    def shape(self):
        return self.mask0.shape


def coarse_shape(H: int, W: int, P: int):
    return math.ceil(H / P), math.ceil(W / P)


def cell_centers(H: int, W: int, P: int):
    """Pixel coordinates (x, y) of the coarse cell centres, each [h, w]."""
    h, w = coarse_shape(H, W, P)
    cy = P * (np.arange(h) + 0.5) - 0.5
    cx = P * (np.arange(w) + 0.5) - 0.5
    return np.meshgrid(cx, cy)


def _source_points(tracks: TrackSet, s: int, t: int):
    if not (0 <= s < tracks.T and 0 <= t < tracks.T):
        raise IndexError(f"frame pair ({s}, {t}) outside [0, {tracks.T})")
    vis = tracks.visible_at(s)
    if len(vis) == 0:
        raise NoVisibleTracksError(f"no track is visible at frame {s}")
    return vis


def _assemble(tracks: TrackSet, s: int, t: int, nearest: np.ndarray, P: int) -> CoarseEstimate:
    pts = tracks.points
    flow = (pts[nearest, t, :2] - pts[nearest, s, :2]).astype(np.float32)
    mask = pts[nearest, t, 2].astype(np.float32)
    return CoarseEstimate(flow0=flow, mask0=mask, P=P, nearest=nearest)


def interpolate(tracks: TrackSet, s: int, t: int, H: int, W: int, P: int = 4,
                chunk: int = 4096) -> CoarseEstimate:
    """Dense argmin over all (cell, visible track) pairs, processed in chunks of cells."""
    vis = _source_points(tracks, s, t)
    sx = tracks.points[vis, s, 0]
    sy = tracks.points[vis, s, 1]
    cx, cy = cell_centers(H, W, P)
    qx, qy = cx.ravel(), cy.ravel()
    nearest = np.empty(qx.shape, dtype=np.int64)
    for a in range(0, len(qx), chunk):
        d2 = (qx[a:a + chunk, None] - sx[None]) ** 2 + (qy[a:a + chunk, None] - sy[None]) ** 2
        nearest[a:a + chunk] = vis[np.argmin(d2, axis=1)]
    return _assemble(tracks, s, t, nearest.reshape(cx.shape), P)


class SpatialHash:
    """Uniform bucket grid over 2-D points stored in CSR form."""

    def __init__(self, x: np.ndarray, y: np.ndarray, cell_size: Optional[float] = None):
        self.x, self.y = x, y
        x0, y0 = float(x.min()), float(y.min())
        span_x = float(x.max()) - x0
        span_y = float(y.max()) - y0
        if cell_size is None:
            # about one point per bucket
            cell_size = math.sqrt(max(span_x * span_y, 1.0) / len(x))
            cell_size = max(cell_size, 1e-3, max(span_x, span_y) / 4096)
        self.cell = float(cell_size)
        self.x0, self.y0 = x0, y0
        self.nx = int(span_x // self.cell) + 1
        self.ny = int(span_y // self.cell) + 1
        ix = np.minimum(((x - x0) // self.cell).astype(np.int64), self.nx - 1)
        iy = np.minimum(((y - y0) // self.cell).astype(np.int64), self.ny - 1)
        cid = iy * self.nx + ix
        order = np.argsort(cid, kind="stable")
        self.order = order
        counts = np.bincount(cid, minlength=self.nx * self.ny)
        self.count = counts
        self.start = np.concatenate([[0], np.cumsum(counts)[:-1]])

    def home(self, qx, qy):
        ix = np.clip(np.floor((qx - self.x0) / self.cell), 0, self.nx - 1).astype(np.int64)
        iy = np.clip(np.floor((qy - self.y0) / self.cell), 0, self.ny - 1).astype(np.int64)
        return ix, iy

    def ring_lower_bound(self, qx, qy, ix, iy, r):
        """Smallest distance from q to any bucket outside the (2r+1)^2 block around (ix, iy)."""
        lo_x, hi_x = ix - r, ix + r
        lo_y, hi_y = iy - r, iy + r
        inf = np.inf
        left = np.where(lo_x > 0, qx - (self.x0 + lo_x * self.cell), inf)
        right = np.where(hi_x < self.nx - 1, (self.x0 + (hi_x + 1) * self.cell) - qx, inf)
        top = np.where(lo_y > 0, qy - (self.y0 + lo_y * self.cell), inf)
        bottom = np.where(hi_y < self.ny - 1, (self.y0 + (hi_y + 1) * self.cell) - qy, inf)
        lb = np.minimum(np.minimum(left, right), np.minimum(top, bottom))
        # slack for bucket assignment round-off
        return np.maximum(lb - 1e-9 * (1.0 + self.cell + np.abs(qx) + np.abs(qy)), 0.0)

    def nearest(self, qx: np.ndarray, qy: np.ndarray, index: np.ndarray) -> np.ndarray:
        """Index (into ``index``) of the nearest point for each query, lowest index on ties."""
        q = len(qx)
        best_d2 = np.full(q, np.inf)
        best = np.full(q, np.iinfo(np.int64).max, dtype=np.int64)
        hx, hy = self.home(qx, qy)
        active = np.arange(q)
        max_r = max(self.nx, self.ny)
        for r in range(max_r + 1):
            if len(active) == 0:
                break
            ax, ay = qx[active], qy[active]
            ahx, ahy = hx[active], hy[active]
            if r == 0:
                offsets = [(0, 0)]
            else:
                offsets = [(dx, -r) for dx in range(-r, r + 1)] + [(dx, r) for dx in range(-r, r + 1)]
                offsets += [(-r, dy) for dy in range(-r + 1, r)] + [(r, dy) for dy in range(-r + 1, r)]
            bd, bi = best_d2[active], best[active]
            for dx, dy in offsets:
                cx, cy = ahx + dx, ahy + dy
                ok = (cx >= 0) & (cx < self.nx) & (cy >= 0) & (cy < self.ny)
                if not ok.any():
                    continue
                sel = np.flatnonzero(ok)
                cid = cy[sel] * self.nx + cx[sel]
                cnt = self.count[cid]
                st = self.start[cid]
                for k in range(int(cnt.max()) if len(cnt) else 0):
                    has = cnt > k
                    rows = sel[has]
                    pid = self.order[st[has] + k]
                    d2 = (ax[rows] - self.x[pid]) ** 2 + (ay[rows] - self.y[pid]) ** 2
                    gi = index[pid]
                    better = (d2 < bd[rows]) | ((d2 == bd[rows]) & (gi < bi[rows]))
                    rows = rows[better]
                    bd[rows] = d2[better]
                    bi[rows] = gi[better]
            best_d2[active], best[active] = bd, bi
            lb = self.ring_lower_bound(ax, ay, ahx, ahy, r)
            # strict: an unvisited point at exactly the best distance may win the tie
            done = lb * lb > bd
            active = active[~done]
        return best


def interpolate_bucketed(tracks: TrackSet, s: int, t: int, H: int, W: int, P: int = 4,
                         cell_size: Optional[float] = None) -> CoarseEstimate:
    """Same result as :func:`interpolate` using a spatial hash and ring search.

    Auxiliary memory is O(N + HW/P^2); no cell-by-track distance matrix is built.
    """
    vis = _source_points(tracks, s, t)
    sx = np.ascontiguousarray(tracks.points[vis, s, 0])
    sy = np.ascontiguousarray(tracks.points[vis, s, 1])
    grid = SpatialHash(sx, sy, cell_size)
    cx, cy = cell_centers(H, W, P)
    nearest = grid.nearest(cx.ravel(), cy.ravel(), vis)
    return _assemble(tracks, s, t, nearest.reshape(cx.shape), P)


def upsample_nearest(coarse: np.ndarray, P: int, H: int, W: int) -> np.ndarray:
    """Repeat each coarse value over its P x P patch and crop to (H, W)."""
    up = np.repeat(np.repeat(coarse, P, axis=0), P, axis=1)
    return up[:H, :W]


def zero_estimate(H: int, W: int, P: int = 4) -> CoarseEstimate:
    """Zero flow and all-visible mask, for running without tracks."""
    h, w = coarse_shape(H, W, P)
    return CoarseEstimate(np.zeros((h, w, 2), np.float32), np.ones((h, w), np.float32), P,
                          np.full((h, w), -1, dtype=np.int64))

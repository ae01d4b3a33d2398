"""Motion-boundary-biased query sampling and tracker adapters."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
from scipy import ndimage

from .core import ContractError, ShapeError, TrackSet, Video, read_tracks
from .synthgen import CorruptionSpec, SceneOracle

EDGE_REL_THRESHOLD = 0.1
EDGE_PERCENTILE = 99.0


@dataclass(frozen=True)
class EdgeMap:
    magnitude: np.ndarray  # [H, W], >= 0
    edges: np.ndarray  # [H, W] bool


@dataclass(frozen=True)
class SamplingBudget:
    N: int
    edge_fraction: float = 0.5
    edge_radius: int = 5

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if not 0.0 <= self.edge_fraction <= 1.0:
            raise ValueError("edge_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class QuerySample:
    points: np.ndarray  # [N, 2] integer pixel positions as (x, y)
    num_edge: int
    fallback: bool


def sobel_magnitude(field: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of a 2-D array with replicated borders."""
    field = np.asarray(field, dtype=np.float64)
    gx = ndimage.sobel(field, axis=1, mode="nearest")
    gy = ndimage.sobel(field, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def flow_edges(pair_flows, video: Optional[Video] = None) -> EdgeMap:
    """Motion boundaries from consecutive-pair flows.

    Per pair, the Sobel magnitudes of both flow channels are summed; pairs are
    combined by a per-pixel maximum. Pixels above 0.1x the 99th percentile of
    the magnitude are edges.
    """
    flows = np.asarray(pair_flows, dtype=np.float64)
    if flows.ndim == 3:
        flows = flows[None]
    if flows.ndim != 4 or flows.shape[-1] != 2:
        raise ShapeError(f"pair flows must be [T-1, H, W, 2], got {flows.shape}")
    if video is not None:
        if flows.shape[1:3] != (video.H, video.W):
            raise ShapeError(f"flow resolution {flows.shape[1:3]} does not match video {(video.H, video.W)}")
        if flows.shape[0] != video.T - 1:
            raise ShapeError(f"expected {video.T - 1} pair flows, got {flows.shape[0]}")
    mag = np.zeros(flows.shape[1:3])
    for f in flows:
        mag = np.maximum(mag, sobel_magnitude(f[..., 0]) + sobel_magnitude(f[..., 1]))
    ref = np.percentile(mag, EDGE_PERCENTILE)
    edges = mag > EDGE_REL_THRESHOLD * ref if ref > 0 else np.zeros(mag.shape, dtype=bool)
    return EdgeMap(magnitude=mag, edges=edges)


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx ** 2 + yy ** 2 <= r ** 2


def sample_queries(edges: EdgeMap, budget: SamplingBudget, seed: int = 0) -> QuerySample:
    """Pick N distinct pixels: a share near motion edges, the rest anywhere."""
    H, W = edges.edges.shape
    N = budget.N
    if N > H * W:
        raise ValueError(f"cannot draw {N} distinct pixels from a {H}x{W} frame")
    rng = np.random.default_rng(seed)
    taken = np.zeros(H * W, dtype=bool)
    n_edge = 0
    fallback = not edges.edges.any()
    chosen = []
    if not fallback and budget.edge_fraction > 0:
        region = ndimage.binary_dilation(edges.edges, structure=disc(budget.edge_radius))
        cand = np.flatnonzero(region.ravel())
        n_edge = min(math.ceil(budget.edge_fraction * N), len(cand))
        pick = rng.choice(cand, size=n_edge, replace=False)
        taken[pick] = True
        chosen.append(pick)
    rest = np.flatnonzero(~taken)
    chosen.append(rng.choice(rest, size=N - n_edge, replace=False))
    idx = np.concatenate(chosen)
    pts = np.stack([idx % W, idx // W], axis=-1).astype(np.float64)
    return QuerySample(points=pts, num_edge=n_edge, fallback=fallback)


def uniform_queries(H: int, W: int, N: int, seed: int = 0) -> QuerySample:
    empty = EdgeMap(np.zeros((H, W)), np.zeros((H, W), dtype=bool))
    out = sample_queries(empty, SamplingBudget(N, edge_fraction=0.0), seed)
    return QuerySample(out.points, 0, False)


# ----------------------------------------------------------------------------
# Trackers
# ----------------------------------------------------------------------------


class Tracker(Protocol):
    def __call__(self, video: Video, queries: np.ndarray) -> TrackSet: ...


class GroundTruthTracker:
    """Exact trajectories read off a synthetic scene."""

    name = "gt"

    def __init__(self, oracle: SceneOracle, s: int = 0):
        self.oracle = oracle
        self.s = s

    def __call__(self, video, queries):
        return self.oracle.tracks(queries, self.s)


class CorruptedTracker:
    """Ground truth plus Gaussian jitter and visibility flips."""

    name = "gt-corrupt"

    def __init__(self, oracle: SceneOracle, corruption: CorruptionSpec, s: int = 0):
        self.oracle = oracle
        self.corruption = corruption
        self.s = s

    def __call__(self, video, queries):
        return self.oracle.tracks(queries, self.s, corruption=self.corruption)


class ExternalTracker:
    """File-based adapter for third-party trackers run offline.

    Writes ``queries.json`` into ``workdir`` and reads back ``tracks.json``
    (or ``tracks_path``) in the standard tracks layout.
    """

    name = "external"

    def __init__(self, workdir, tracks_path=None):
        self.workdir = Path(workdir)
        self.tracks_path = Path(tracks_path) if tracks_path else self.workdir / "tracks.json"

    def __call__(self, video, queries):
        self.workdir.mkdir(parents=True, exist_ok=True)
        with open(self.workdir / "queries.json", "w") as fh:
            json.dump([[float(x), float(y)] for x, y in np.asarray(queries)], fh)
        if not self.tracks_path.exists():
            raise FileNotFoundError(f"external tracker output {self.tracks_path} not found")
        return read_tracks(self.tracks_path, source="external")


def run_tracker(adapter: Tracker, video: Video, queries) -> TrackSet:
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    tracks = adapter(video, queries)
    if tracks.N != len(queries):
        raise ContractError(f"tracker returned {tracks.N} tracks for {len(queries)} queries")
    if tracks.T != video.T:
        raise ContractError(f"tracker returned {tracks.T} frames, video has {video.T}")
    return tracks

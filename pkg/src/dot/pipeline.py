"""End-to-end dense tracking: seed queries, track, interpolate, refine."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .core import TAU, ConfigError, TrackSet, Video, binarize_mask, pad_to_multiple
from .interp import CoarseEstimate, interpolate_bucketed, upsample_nearest, zero_estimate
from .core import NoVisibleTracksError
from .refiner import Refiner, refine
from .seeding import EdgeMap, SamplingBudget, flow_edges, run_tracker, sample_queries, uniform_queries


@dataclass
class PairResult:
    flow: np.ndarray  # [H, W, 2]
    mask: np.ndarray  # [H, W] soft
    coarse: CoarseEstimate

    def binary_mask(self, tau: float = TAU) -> np.ndarray:
        return binarize_mask(self.mask, tau)


@dataclass
class DotOutput:
    queries: Optional[np.ndarray]
    tracks: Optional[TrackSet]
    pairs: Dict[int, PairResult] = field(default_factory=dict)
    fallback_sampling: bool = False


def edge_map_from_flows(video: Video, pair_flows: Optional[np.ndarray]) -> Optional[EdgeMap]:
    if pair_flows is None:
        return None
    return flow_edges(pair_flows, video)


def model_pair_flows(model: Refiner, video: Video) -> np.ndarray:
    """Consecutive-pair flows from the refiner alone (zero init, all visible)."""
    H, W = video.H, video.W
    P = model.cfg.P
    Hp, Wp = pad_to_multiple(H, W, P)
    est = zero_estimate(Hp, Wp, P)
    return np.stack([refine(model, video.frames[t], video.frames[t + 1], est.flow0, est.mask0)[0]
                     for t in range(video.T - 1)])


def choose_queries(video: Video, N: int, sampling: str, edges: Optional[EdgeMap], seed: int):
    if sampling == "motion" and edges is not None:
        q = sample_queries(edges, SamplingBudget(N), seed)
        return q.points, q.fallback
    if sampling not in ("motion", "uniform"):
        raise ConfigError(f"unknown sampling mode {sampling!r}")
    return uniform_queries(video.H, video.W, N, seed).points, sampling == "motion"


def run_dot(video: Video, tracker=None, *, model: Optional[Refiner] = None, N: int = 64, s: int = 0,
            targets: Optional[Sequence[int]] = None, sampling: str = "motion",
            pair_flows: Optional[np.ndarray] = None, use_refine: bool = True, use_tracks: bool = True,
            P: Optional[int] = None, seed: int = 0, tracks: Optional[TrackSet] = None) -> DotOutput:
    """Dense flow and visibility from frame ``s`` to every frame in ``targets``.

    ``use_refine=False`` returns nearest-upsampled interpolation;
    ``use_tracks=False`` refines from zero flow and an all-visible mask.
    """
    if not use_refine and not use_tracks:
        raise ConfigError("disabling both refinement and tracks leaves nothing to compute")
    if use_refine and model is None:
        raise ConfigError("refinement requested without a model")
    if P is None:
        P = model.cfg.P if model is not None else 4
    if targets is None:
        targets = [t for t in range(video.T) if t != s]
    H, W = video.H, video.W
    Hp, Wp = pad_to_multiple(H, W, P)

    queries, fallback = None, False
    if use_tracks and tracks is None:
        edges = edge_map_from_flows(video, pair_flows) if sampling == "motion" else None
        queries, fallback = choose_queries(video, N, sampling, edges, seed)
        tracks = run_tracker(tracker, video, queries)
    out = DotOutput(queries=queries, tracks=tracks if use_tracks else None, fallback_sampling=fallback)

    for t in targets:
        if use_tracks:
            try:
                est = interpolate_bucketed(tracks, s, t, Hp, Wp, P)
            except NoVisibleTracksError:
                est = zero_estimate(Hp, Wp, P)
        else:
            est = zero_estimate(Hp, Wp, P)
        if use_refine:
            flow, mask = refine(model, video.frames[s], video.frames[t], est.flow0, est.mask0)
        else:
            flow = upsample_nearest(est.flow0, P, H, W)
            mask = upsample_nearest(est.mask0, P, H, W)
        out.pairs[t] = PairResult(flow=flow, mask=mask, coarse=est)
    return out


def naive_per_query_refine(model: Refiner, video: Video, s: int, t: int, est: CoarseEstimate):
    """Deliberately wasteful dense baseline: one full refinement per coarse cell.

    Mirrors running a sparse method once per query; each run contributes only
    the P x P patch of its own cell.
    """
    P = model.cfg.P
    H, W = video.H, video.W
    flow = np.zeros((H, W, 2), np.float32)
    mask = np.zeros((H, W), np.float32)
    h, w = est.mask0.shape
    for i in range(h):
        for j in range(w):
            f, m = refine(model, video.frames[s], video.frames[t], est.flow0, est.mask0)
            flow[i * P:(i + 1) * P, j * P:(j + 1) * P] = f[i * P:(i + 1) * P, j * P:(j + 1) * P]
            mask[i * P:(i + 1) * P, j * P:(j + 1) * P] = m[i * P:(i + 1) * P, j * P:(j + 1) * P]
    return flow, mask

"""Dense-motion and point-tracking metrics, occlusion from flow consistency, timing."""

from __future__ import annotations

import csv
import json
import platform
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from .core import TAU, ContractError, ShapeError
from .refiner import bilinear_sample_np

TAP_THRESHOLDS = (1, 2, 4, 8, 16)
TAP_RESOLUTION = (256, 256)
FB_ALPHA = 0.01
FB_BETA = 0.5


def _vals(x):
    return np.asarray(getattr(x, "values", x))


def epe(pred_flow, gt_flow, gt_vis=None):
    """Mean end-point error over all, visible and occluded pixels.

    A split with no pixels is reported as None.
    """
    pred, gt = _vals(pred_flow).astype(np.float64), _vals(gt_flow).astype(np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"flow shapes differ: {pred.shape} vs {gt.shape}")
    err = np.sqrt(((pred - gt) ** 2).sum(-1))
    out_all = float(err.mean())
    if gt_vis is None:
        return out_all, None, None
    vis = _vals(gt_vis) >= 0.5
    if vis.shape != err.shape:
        raise ShapeError(f"mask shape {vis.shape} does not match flow {err.shape}")
    out_vis = float(err[vis].mean()) if vis.any() else None
    out_occ = float(err[~vis].mean()) if (~vis).any() else None
    return out_all, out_vis, out_occ


def _check_binary(m, name):
    m = _vals(m)
    if not np.all((m == 0) | (m == 1)):
        raise ContractError(f"{name} must be binary")
    return m.astype(bool)


def occlusion_iou(pred_vis, gt_vis) -> float:
    """IoU of the occluded (value 0) regions; 1.0 when both have none."""
    p = ~_check_binary(pred_vis, "prediction")
    g = ~_check_binary(gt_vis, "ground truth")
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class TapQuery:
    frame: int
    x: float
    y: float
    pred_xy: np.ndarray  # [T, 2]
    pred_vis: np.ndarray  # [T], soft or binary
    gt_xy: np.ndarray  # [T, 2]
    gt_vis: np.ndarray  # [T] binary

    def __post_init__(self):
        if len(self.pred_xy) != len(self.gt_xy) or len(self.pred_vis) != len(self.gt_vis):
            raise ShapeError("predicted and ground-truth trajectories span different frames")


def tap_metrics(queries: Sequence[TapQuery], size=None, thresholds=TAP_THRESHOLDS, tau: float = TAU,
                exclude_query_frame: bool = False):
    """Average Jaccard, mean position accuracy over thresholds and occlusion accuracy.

    Positions are rescaled from ``size`` = (H, W) to 256 x 256 before thresholding.
    Predicted visibility is binarised with ``tau``.
    """
    if not queries:
        raise ValueError("no queries")
    pred_xy = np.stack([np.asarray(q.pred_xy, dtype=np.float64) for q in queries])
    gt_xy = np.stack([np.asarray(q.gt_xy, dtype=np.float64) for q in queries])
    pred_vis = np.stack([np.asarray(q.pred_vis, dtype=np.float64) for q in queries]) >= tau
    gt_vis = np.stack([np.asarray(q.gt_vis, dtype=np.float64) for q in queries]) >= 0.5
    valid = np.ones(gt_vis.shape, dtype=bool)
    if exclude_query_frame:
        for i, q in enumerate(queries):
            valid[i, q.frame] = False
    if size is not None:
        H, W = size
        scale = np.array([TAP_RESOLUTION[1] / W, TAP_RESOLUTION[0] / H])
    else:
        scale = np.ones(2)
    dist = np.sqrt((((pred_xy - gt_xy) * scale) ** 2).sum(-1))

    oa = float((pred_vis == gt_vis)[valid].mean())
    fracs, jaccs = [], []
    gv = gt_vis & valid
    for thr in thresholds:
        within = dist < thr
        fracs.append((within & gv).sum() / max(gv.sum(), 1))
        tp = (gv & pred_vis & within).sum()
        fp = (valid & pred_vis & (~gt_vis | ~within)).sum()
        fn = (gv & (~pred_vis | ~within)).sum()
        denom = tp + fp + fn
        jaccs.append(tp / denom if denom else 1.0)
    return float(np.mean(jaccs)), float(np.mean(fracs)), oa


def fb_consistency_mask(flow_fwd, flow_bwd, alpha: float = FB_ALPHA, beta: float = FB_BETA) -> np.ndarray:
    """Binary visibility from a forward-backward check (1 = visible).

    A pixel is occluded when its forward target leaves the frame or when
    |f + b|^2 > alpha (|f|^2 + |b|^2) + beta, with b the backward flow sampled
    bilinearly at the forward target.
    """
    f = _vals(flow_fwd).astype(np.float64)
    b = _vals(flow_bwd).astype(np.float64)
    if f.shape != b.shape:
        raise ShapeError(f"flow shapes differ: {f.shape} vs {b.shape}")
    H, W = f.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    tx, ty = xs + f[..., 0], ys + f[..., 1]
    inside = (tx >= 0) & (tx <= W - 1) & (ty >= 0) & (ty <= H - 1)
    bw = bilinear_sample_np(b, tx, ty)
    lhs = ((f + bw) ** 2).sum(-1)
    rhs = alpha * ((f ** 2).sum(-1) + (bw ** 2).sum(-1)) + beta
    return (inside & (lhs <= rhs)).astype(np.float32)


def environment_fingerprint() -> dict:
    import torch

    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "processor": platform.processor(),
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
        "numpy": np.__version__,
    }


@dataclass
class TimingResult:
    mean: float
    std: float
    runs: List[float]
    environment: dict


def time_harness(method: Callable, items: Iterable, repetitions: int = 5, warmup: bool = True) -> TimingResult:
    """Wall-clock seconds per item for ``method(*item)``; one untimed warm-up call."""
    items = list(items)
    if not items:
        raise ValueError("no items to time")
    if warmup:
        method(*items[0])
    runs = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for it in items:
            method(*it)
        runs.append((time.perf_counter() - t0) / len(items))
    std = statistics.stdev(runs) if len(runs) > 1 else 0.0
    return TimingResult(float(np.mean(runs)), float(std), runs, environment_fingerprint())


# ----------------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------------

CSV_COLUMNS = ["name", "epe_all", "epe_vis", "epe_occ", "iou_occ", "time"]


def aggregate(rows: List[dict], keys=("epe_all", "epe_vis", "epe_occ", "iou_occ", "time")) -> dict:
    out = {}
    for k in keys:
        vals = [r[k] for r in rows if r.get(k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


def write_report(per_video: List[dict], summary: dict, json_path, csv_path=None) -> None:
    with open(json_path, "w") as fh:
        json.dump({"per_video": per_video, "aggregate": summary}, fh, indent=1)
    if csv_path:
        write_summary_csv([{"name": "aggregate", **summary}], csv_path)


def _fmt(v):
    return "" if v is None else f"{v:.6f}" if isinstance(v, float) else v


def write_summary_csv(rows: List[dict], path, columns=CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])

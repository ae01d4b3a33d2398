"""PNG figures: flow color maps, masks, track overlays and metric curves."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .core import TrackSet, flow_to_color  # noqa: E402


def save_flow_png(flow: np.ndarray, path, max_norm: Optional[float] = None) -> Path:
    Image.fromarray(flow_to_color(flow, max_norm)).save(path)
    return Path(path)


def save_track_overlay(frame: np.ndarray, tracks: TrackSet, t: int, path, s: Optional[int] = None) -> Path:
    """Draw track positions at frame t (crosses visible, circles occluded), with tails from s."""
    H, W = frame.shape[:2]
    fig, ax = plt.subplots(figsize=(4, 4 * H / W), dpi=100)
    ax.imshow(np.clip(frame, 0, 1))
    pts = tracks.points
    if s is not None:
        for k in range(tracks.N):
            ax.plot(pts[k, min(s, t):max(s, t) + 1, 0], pts[k, min(s, t):max(s, t) + 1, 1], lw=0.6, alpha=0.6)
    vis = pts[:, t, 2] == 1
    ax.scatter(pts[vis, t, 0], pts[vis, t, 1], marker="x", s=12, c="yellow")
    ax.scatter(pts[~vis, t, 0], pts[~vis, t, 1], marker="o", s=12, facecolors="none", edgecolors="red")
    ax.set_xlim(-0.5, W - 0.5)
    ax.set_ylim(H - 0.5, -0.5)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def save_curve(xs: Sequence[float], ys: Sequence[float], path, xlabel: str, ylabel: str = "EPE (px)",
               title: str = "", logx: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    ax.plot(xs, ys, marker="o")
    if logx:
        ax.set_xscale("log", base=2)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([str(x) for x in xs])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def save_bars(names: Sequence[str], values: Sequence[float], path, ylabel: str = "EPE (px)") -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names)), 3), dpi=100)
    ax.bar(range(len(names)), values)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)

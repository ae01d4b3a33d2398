"""Shared domain types, validation and file encodings.

Coordinates are (x, y) = (column, row) with the origin at the centre of the
top-left pixel. Flows are stored as (dx, dy). Visibility uses 1 = visible,
0 = occluded.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

TAU = 0.8
FLO_MAGIC = b"PIEH"


class DotError(Exception):
    pass


class ShapeError(DotError, ValueError):
    pass


class FormatError(DotError, ValueError):
    pass


class ContractError(DotError, ValueError):
    pass


class ConfigError(DotError, ValueError):
    pass


class SpecError(DotError, ValueError):
    pass


class NoVisibleTracksError(DotError, ValueError):
    """Raised when no track is visible in the source frame."""


# ----------------------------------------------------------------------------
# Domain types
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Video:
    frames: np.ndarray  # [T, H, W, 3] in [0, 1]
    frame_rate: float = 24.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ShapeError(f"frames must be [T, H, W, 3], got {frames.shape}")
        if frames.shape[0] < 2:
            raise ShapeError("a video needs at least two frames")
        if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
            raise ValueError("frame values must lie in [0, 1]")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[1]

    @property
    def W(self) -> int:
        return self.frames.shape[2]

    def __len__(self):
        return self.T


@dataclass(frozen=True)
class TrackSet:
    """N tracks over T frames, stored as an [N, T, 3] array of (x, y, v)."""

    points: np.ndarray
    source: str = "sampled"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[-1] != 3:
            raise ShapeError(f"tracks must be [N, T, 3], got {pts.shape}")
        if pts.shape[0] < 1:
            raise ShapeError("a track set needs at least one track")
        if not np.all(np.isfinite(pts[..., :2])):
            raise ValueError("track positions must be finite")
        if not np.all(np.isin(pts[..., 2], (0.0, 1.0))):
            raise ValueError("visibility flags must be 0 or 1")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def N(self) -> int:
        return self.points.shape[0]

    @property
    def T(self) -> int:
        return self.points.shape[1]

    @property
    def xy(self) -> np.ndarray:
        return self.points[..., :2]

    @property
    def vis(self) -> np.ndarray:
        return self.points[..., 2].astype(bool)

    def visible_at(self, s: int) -> np.ndarray:
        """Indices of the tracks visible at frame ``s``."""
        return np.flatnonzero(self.points[:, s, 2] == 1.0)

    def __eq__(self, other):
        if not isinstance(other, TrackSet):
            return NotImplemented
        return self.points.shape == other.points.shape and np.array_equal(self.points, other.points)

    __hash__ = None


@dataclass(frozen=True)
class FlowField:
    values: np.ndarray  # [H, W, 2]
    resolution: str = "fine"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or v.shape[-1] != 2:
            raise ShapeError(f"flow must be [H, W, 2], got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("flow values must be finite")
        if self.resolution not in ("fine", "coarse"):
            raise ValueError(f"unknown resolution tag {self.resolution!r}")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape[:2]


@dataclass(frozen=True)
class VisibilityMask:
    values: np.ndarray  # [H, W]
    binary: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ShapeError(f"mask must be [H, W], got {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("mask values must lie in [0, 1]")
        if self.binary and not np.all((v == 0.0) | (v == 1.0)):
            raise ValueError("binary mask holds values other than 0 and 1")
        object.__setattr__(self, "values", v)


@dataclass
class MetricReport:
    epe_all: Optional[float] = None
    epe_vis: Optional[float] = None
    epe_occ: Optional[float] = None
    iou_occ: Optional[float] = None
    aj: Optional[float] = None
    delta_avg: Optional[float] = None
    oa: Optional[float] = None
    wall_time: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("iou_occ", "aj", "delta_avg", "oa"):
            val = getattr(self, name)
            if val is not None and not (0.0 <= val <= 1.0):
                raise ValueError(f"{name}={val} outside [0, 1]")
        for name in ("epe_all", "epe_vis", "epe_occ"):
            val = getattr(self, name)
            if val is not None and val < 0:
                raise ValueError(f"{name}={val} is negative")

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("epe_all", "epe_vis", "epe_occ", "iou_occ", "aj", "delta_avg", "oa", "wall_time")}
        d.update(self.extra)
        return d


# ----------------------------------------------------------------------------
# Masks
# ----------------------------------------------------------------------------


def binarize_mask(mask, tau: float = TAU):
    """Threshold a soft mask: 1 where value >= tau, else 0.

    Accepts a VisibilityMask or a plain array and returns the same kind.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    if isinstance(mask, VisibilityMask):
        return VisibilityMask((mask.values >= tau).astype(np.float32), binary=True)
    return (np.asarray(mask) >= tau).astype(np.float32)


# ----------------------------------------------------------------------------
# Flow visualisation (Middlebury colour wheel)
# ----------------------------------------------------------------------------


def _color_wheel() -> np.ndarray:
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    ncols = RY + YG + GC + CB + BM + MR
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[0:RY, 0] = 255
    wheel[0:RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel / 255.0


COLOR_WHEEL = _color_wheel()


def flow_to_color(flow, max_norm: Optional[float] = None) -> np.ndarray:
    """Encode a flow field as an RGB uint8 image with the Middlebury wheel.

    Zero motion is white; saturation grows with magnitude relative to
    ``max_norm`` (the largest magnitude in the field when None).
    """
    f = np.asarray(getattr(flow, "values", flow), dtype=np.float64)
    u, v = f[..., 0], f[..., 1]
    rad = np.sqrt(u ** 2 + v ** 2)
    if max_norm is None:
        max_norm = float(rad.max()) if rad.size else 0.0
    if max_norm > 0:
        u, v, rad = u / max_norm, v / max_norm, rad / max_norm

    ncols = COLOR_WHEEL.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    frac = (fk - k0)[..., None]
    col = (1 - frac) * COLOR_WHEEL[k0] + frac * COLOR_WHEEL[k1]
    inside = (rad <= 1)[..., None]
    r = rad[..., None]
    col = np.where(inside, 1 - r * (1 - col), col * 0.75)
    return np.floor(255 * col + 0.5).clip(0, 255).astype(np.uint8)


# ----------------------------------------------------------------------------
# .flo files
# ----------------------------------------------------------------------------


def write_flo(flow, path: Union[str, os.PathLike]) -> None:
    f = np.asarray(getattr(flow, "values", flow))
    if f.ndim != 3 or f.shape[-1] != 2:
        raise ShapeError(f"flow must be [H, W, 2], got {f.shape}")
    h, w = f.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(f, dtype="<f4").tobytes())


def read_flo(path: Union[str, os.PathLike]) -> np.ndarray:
    """Read a Middlebury .flo file into an [H, W, 2] float32 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    if data[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    w, h = struct.unpack("<ii", data[4:12])
    if w < 0 or h < 0:
        raise FormatError(f"{path}: negative dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise FormatError(f"{path}: payload is {len(data) - 12} bytes, expected {expected - 12}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


# ----------------------------------------------------------------------------
# Image, mask and track files
# ----------------------------------------------------------------------------


def write_mask_png(mask, path) -> None:
    from PIL import Image

    m = np.asarray(getattr(mask, "values", mask))
    Image.fromarray(np.where(m >= 0.5, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= 128).astype(np.float32)


def write_frame_png(frame: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)).save(path)


def read_frame_png(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def load_video_dir(path, frame_rate: float = 24.0) -> Video:
    """Load a video stored as numbered PNG files (``%04d.png``)."""
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no frames found in {path}")
    return Video(np.stack([read_frame_png(f) for f in files]), frame_rate=frame_rate)


def save_video_dir(video: Video, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video.frames):
        write_frame_png(frame, path / f"{i:04d}.png")


def tracks_to_json(tracks: TrackSet) -> dict:
    return {
        "T": tracks.T,
        "tracks": [[[float(x), float(y), int(v)] for x, y, v in track] for track in tracks.points],
    }


def tracks_from_json(doc: dict, source: str = "sampled") -> TrackSet:
    try:
        T = int(doc["T"])
        pts = np.asarray(doc["tracks"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed tracks document: {e}") from e
    if pts.ndim != 3 or pts.shape[1] != T or pts.shape[2] != 3:
        raise FormatError(f"tracks array has shape {pts.shape}, expected [N, {T}, 3]")
    return TrackSet(pts, source=source)


def write_tracks(tracks: TrackSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(tracks_to_json(tracks), fh)


def read_tracks(path, source: str = "sampled") -> TrackSet:
    with open(path) as fh:
        return tracks_from_json(json.load(fh), source=source)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def pad_to_multiple(h: int, w: int, p: int):
    """Smallest (H', W') >= (h, w) divisible by p."""
    return int(math.ceil(h / p) * p), int(math.ceil(w / p) * p)

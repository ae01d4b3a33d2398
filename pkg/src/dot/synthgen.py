"""Procedural videos of textured affine-rigid shapes with analytic ground truth.

Every object carries a local frame; a surface point with local coordinates
``u`` sits at ``c(t) + sigma(t) R(theta(t)) u`` at (real-valued) time ``t``.
Rendering, dense flow, visibility and point tracks are all computed from
this single transport, so they agree with each other by construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .core import SpecError, TrackSet, Video, write_flo, write_mask_png, write_tracks, save_video_dir

BACKGROUND = -1
BLUR_OFFSETS = (-0.375, -0.125, 0.125, 0.375)
TEXTURE_SIZE = 96


@dataclass
class ObjectSpec:
    shape: str  # "rectangle" | "ellipse"
    half_size: Tuple[float, float]  # local half extents (a, b)
    center: Tuple[float, float]  # position at t = 0
    velocity: Tuple[float, float] = (0.0, 0.0)  # px / frame
    acceleration: Tuple[float, float] = (0.0, 0.0)  # px / frame^2
    angle: float = 0.0  # rad at t = 0
    angular_velocity: float = 0.0  # rad / frame
    scale_rate: float = 0.0  # log-scale change per frame
    texture_seed: int = 0

    def center_at(self, t):
        t = np.asarray(t, dtype=np.float64)
        c = np.asarray(self.center)
        v = np.asarray(self.velocity)
        a = np.asarray(self.acceleration)
        return c + v * t[..., None] + 0.5 * a * (t ** 2)[..., None]

    def angle_at(self, t):
        return self.angle + self.angular_velocity * t

    def scale_at(self, t):
        return np.exp(self.scale_rate * t)

    def to_local(self, x, y, t):
        cx, cy = self.center_at(t)
        th, sc = self.angle_at(t), self.scale_at(t)
        dx, dy = x - cx, y - cy
        cos, sin = np.cos(th), np.sin(th)
        return (cos * dx + sin * dy) / sc, (-sin * dx + cos * dy) / sc

    def to_world(self, u, v, t):
        cx, cy = self.center_at(t)
        th, sc = self.angle_at(t), self.scale_at(t)
        cos, sin = np.cos(th), np.sin(th)
        return cx + sc * (cos * u - sin * v), cy + sc * (sin * u + cos * v)

    def contains_local(self, u, v):
        a, b = self.half_size
        if self.shape == "rectangle":
            return (np.abs(u) <= a) & (np.abs(v) <= b)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0


@dataclass
class SceneSpec:
    seed: int
    T: int
    H: int
    W: int
    objects: List[ObjectSpec] = field(default_factory=list)
    background_velocity: Tuple[float, float] = (0.0, 0.0)
    depth_order: Optional[List[int]] = None  # bottom to top; topmost last
    motion_blur: bool = False
    frame_rate: float = 60.0

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    def order(self) -> List[int]:
        return list(range(len(self.objects))) if self.depth_order is None else list(self.depth_order)

    def validate(self) -> None:
        if self.T < 2:
            raise SpecError("T must be at least 2")
        if self.H < 1 or self.W < 1:
            raise SpecError("frame size must be positive")
        if sorted(self.order()) != list(range(len(self.objects))):
            raise SpecError("depth order must be a permutation of the objects")
        for i, obj in enumerate(self.objects):
            if obj.shape not in ("rectangle", "ellipse"):
                raise SpecError(f"object {i}: unknown shape {obj.shape!r}")
            if min(obj.half_size) <= 0:
                raise SpecError(f"object {i}: zero-area shape")
        if self.objects:
            ys, xs = np.mgrid[0:self.H, 0:self.W].astype(np.float64)
            for t in range(self.T):
                if not any(o.contains_local(*o.to_local(xs, ys, t)).any() for o in self.objects):
                    raise SpecError(f"no object is in frame at t={t}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SceneSpec":
        doc = dict(doc)
        doc["objects"] = [ObjectSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in o.items()})
                          for o in doc.get("objects", [])]
        doc["background_velocity"] = tuple(doc.get("background_velocity", (0.0, 0.0)))
        return cls(**doc)


@dataclass
class CorruptionSpec:
    """Noise applied to ground-truth tracks to mimic an imperfect tracker."""

    sigma: float = 1.0  # px, Gaussian jitter per coordinate
    flip_prob: float = 0.05  # probability of flipping each visibility flag
    seed: int = 0


def _make_texture(seed: int, size: int = TEXTURE_SIZE) -> np.ndarray:
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.1, 0.9, size=(4, 4, 3))
    base = ndimage.zoom(base, (size / 4, size / 4, 1), order=1, mode="grid-wrap", grid_mode=True)
    noise = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(size, size, 3)), sigma=(1.2, 1.2, 0), mode="wrap")
    noise /= np.abs(noise).max() + 1e-8
    return np.clip(base + 0.35 * noise, 0.0, 1.0)


def _sample_texture(tex: np.ndarray, r, c, mode: str) -> np.ndarray:
    coords = [np.asarray(r), np.asarray(c)]
    out = np.stack(
        [ndimage.map_coordinates(tex[..., k], coords, order=1, mode=mode) for k in range(3)], axis=-1
    )
    return out


class SceneOracle:
    """Read-only handle answering ground-truth queries about a generated scene."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.order = spec.order()
        self.textures = [_make_texture(o.texture_seed) for o in spec.objects]
        self.bg_texture = _make_texture(spec.seed * 7919 + 17)

    @property
    def T(self) -> int:
        return self.spec.T

    def _check_frame(self, t: int) -> None:
        if not 0 <= t < self.spec.T:
            raise IndexError(f"frame {t} outside [0, {self.spec.T})")

    # -- geometry ---------------------------------------------------------

    def owner(self, x, y, t) -> np.ndarray:
        """Index of the topmost object covering (x, y) at time t, or -1."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        out = np.full(np.broadcast(x, y).shape, BACKGROUND, dtype=np.int64)
        for k in self.order:
            obj = self.spec.objects[k]
            inside = obj.contains_local(*obj.to_local(x, y, t))
            out[inside] = k
        return out

    def transport(self, x, y, s, t, owner=None):
        """Move surface points at (x, y) at time s to their location at time t."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if s == t:
            return x.copy(), y.copy()
        if owner is None:
            owner = self.owner(x, y, s)
        bvx, bvy = self.spec.background_velocity
        xt = np.array(x + bvx * (t - s))
        yt = np.array(y + bvy * (t - s))
        for k, obj in enumerate(self.spec.objects):
            sel = owner == k
            if not np.any(sel):
                continue
            u, v = obj.to_local(x[sel], y[sel], s)
            xt[sel], yt[sel] = obj.to_world(u, v, t)
        return xt, yt

    def in_frame(self, x, y) -> np.ndarray:
        return (x >= 0) & (x <= self.spec.W - 1) & (y >= 0) & (y <= self.spec.H - 1)

    def visibility(self, x, y, s, t, owner=None):
        """Target positions and visibility of surface points at (x, y) at s."""
        if owner is None:
            owner = self.owner(x, y, s)
        xt, yt = self.transport(x, y, s, t, owner)
        vis = self.in_frame(xt, yt) & (self.owner(xt, yt, t) == owner)
        return xt, yt, vis

    # -- rendering --------------------------------------------------------

    def render(self, t: float) -> np.ndarray:
        spec = self.spec
        ys, xs = np.mgrid[0:spec.H, 0:spec.W].astype(np.float64)
        bvx, bvy = spec.background_velocity
        img = _sample_texture(self.bg_texture, ys - bvy * t, xs - bvx * t, mode="grid-wrap")
        for k in self.order:
            obj = spec.objects[k]
            u, v = obj.to_local(xs, ys, t)
            inside = obj.contains_local(u, v)
            if not inside.any():
                continue
            tex = self.textures[k]
            half = (tex.shape[0] - 1) / 2.0
            colors = _sample_texture(tex, v[inside] + half, u[inside] + half, mode="grid-wrap")
            img[inside] = colors
        return np.clip(img, 0.0, 1.0)

    def frames(self) -> np.ndarray:
        out = []
        for t in range(self.spec.T):
            if self.spec.motion_blur:
                out.append(np.mean([self.render(t + d) for d in BLUR_OFFSETS], axis=0))
            else:
                out.append(self.render(float(t)))
        return np.stack(out).astype(np.float32)

    # -- ground truth -----------------------------------------------------

    def pixel_grid(self):
        ys, xs = np.mgrid[0:self.spec.H, 0:self.spec.W].astype(np.float64)
        return xs, ys

    def flow(self, s: int, t: int) -> np.ndarray:
        self._check_frame(s)
        self._check_frame(t)
        xs, ys = self.pixel_grid()
        xt, yt = self.transport(xs, ys, s, t)
        return np.stack([xt - xs, yt - ys], axis=-1).astype(np.float32)

    def vis(self, s: int, t: int) -> np.ndarray:
        self._check_frame(s)
        self._check_frame(t)
        xs, ys = self.pixel_grid()
        _, _, v = self.visibility(xs, ys, s, t)
        return v.astype(np.float32)

    def flow_and_vis(self, s: int, t: int):
        self._check_frame(s)
        self._check_frame(t)
        xs, ys = self.pixel_grid()
        xt, yt, v = self.visibility(xs, ys, s, t)
        return np.stack([xt - xs, yt - ys], axis=-1).astype(np.float32), v.astype(np.float32)

    def tracks(self, queries, s: int = 0, corruption: Optional[CorruptionSpec] = None) -> TrackSet:
        """Analytic trajectories of query points (x, y) given at frame s."""
        self._check_frame(s)
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
        x, y = q[:, 0], q[:, 1]
        if not np.all(self.in_frame(x, y)):
            raise ValueError("query points must lie inside the frame")
        owner = self.owner(x, y, s)
        pts = np.zeros((len(q), self.spec.T, 3))
        for t in range(self.spec.T):
            xt, yt, v = self.visibility(x, y, s, t, owner)
            pts[:, t, 0], pts[:, t, 1], pts[:, t, 2] = xt, yt, v
        source = "ground-truth"
        if corruption is not None:
            pts = corrupt_tracks(pts, corruption)
            source = "ground-truth-corrupt"
        return TrackSet(pts, source=source)


def corrupt_tracks(points: np.ndarray, corruption: CorruptionSpec) -> np.ndarray:
    """Gaussian position jitter plus random visibility flips."""
    rng = np.random.default_rng(corruption.seed)
    out = np.array(points, dtype=np.float64, copy=True)
    if corruption.sigma > 0:
        out[..., :2] += rng.normal(0.0, corruption.sigma, size=out[..., :2].shape)
    if corruption.flip_prob > 0:
        flips = rng.random(out.shape[:2]) < corruption.flip_prob
        out[..., 2] = np.where(flips, 1.0 - out[..., 2], out[..., 2])
    return out


def generate(spec: SceneSpec) -> Tuple[Video, SceneOracle]:
    spec.validate()
    oracle = SceneOracle(spec)
    return Video(oracle.frames(), frame_rate=spec.frame_rate), oracle


# ----------------------------------------------------------------------------
# Random scenes and presets
# ----------------------------------------------------------------------------

PRESETS = {
    "cvo-like-clean": dict(T=7, motion_blur=False),
    "cvo-like-final": dict(T=7, motion_blur=True),
    "cvo-like-extended": dict(T=24, motion_blur=False, speed=0.6),
}


def random_scene(seed: int, T: int = 8, H: int = 64, W: int = 64, num_objects: Tuple[int, int] = (2, 4),
                 motion_blur: bool = False, speed: float = 1.0, max_tries: int = 50) -> SceneSpec:
    """Sample a valid random scene; motion magnitudes scale with frame size."""
    rng = np.random.default_rng(seed)
    scale = min(H, W) / 64.0
    for _ in range(max_tries):
        n = int(rng.integers(num_objects[0], num_objects[1] + 1))
        objects = []
        for _ in range(n):
            a, b = rng.uniform(5, 14, size=2) * scale
            vel = rng.uniform(-2.5, 2.5, size=2) * scale * speed
            objects.append(ObjectSpec(
                shape=str(rng.choice(["rectangle", "ellipse"])),
                half_size=(float(a), float(b)),
                center=tuple(float(c) for c in rng.uniform(0.15, 0.85, size=2) * (W, H)),
                velocity=tuple(float(v) for v in vel),
                acceleration=tuple(float(v) for v in rng.normal(0, 0.08, size=2) * scale * speed),
                angle=float(rng.uniform(-np.pi, np.pi)),
                angular_velocity=float(rng.uniform(-0.06, 0.06) * speed),
                scale_rate=float(rng.uniform(-0.02, 0.02) * speed),
                texture_seed=int(rng.integers(2 ** 31)),
            ))
        spec = SceneSpec(
            seed=seed, T=T, H=H, W=W, objects=objects,
            background_velocity=tuple(float(v) for v in rng.uniform(-1.0, 1.0, size=2) * scale * speed),
            depth_order=[int(i) for i in rng.permutation(n)],
            motion_blur=motion_blur,
        )
        try:
            spec.validate()
        except SpecError:
            continue
        return spec
    raise SpecError(f"could not sample a valid scene for seed {seed}")


def preset_scene(preset: str, seed: int, H: int = 64, W: int = 64) -> SceneSpec:
    if preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return random_scene(seed, H=H, W=W, **PRESETS[preset])


def write_scene(spec: SceneSpec, out_dir, pairs: Optional[Sequence[Tuple[int, int]]] = None,
                num_tracks: int = 256) -> Path:
    """Write ``scene_<seed>/`` with frames, ground-truth flows, masks and tracks."""
    video, oracle = generate(spec)
    root = Path(out_dir) / f"scene_{spec.seed}"
    save_video_dir(video, root / "frames")
    gt = root / "gt"
    gt.mkdir(parents=True, exist_ok=True)
    if pairs is None:
        pairs = [(0, t) for t in range(1, spec.T)]
    for s, t in pairs:
        flow, vis = oracle.flow_and_vis(s, t)
        write_flo(flow, gt / f"flow_{s}_{t}.flo")
        write_mask_png(vis, gt / f"vis_{s}_{t}.png")
    rng = np.random.default_rng(spec.seed)
    idx = rng.choice(spec.H * spec.W, size=min(num_tracks, spec.H * spec.W), replace=False)
    queries = np.stack([idx % spec.W, idx // spec.W], axis=-1).astype(np.float64)
    write_tracks(oracle.tracks(queries, 0), gt / "tracks.json")
    with open(root / "spec.json", "w") as fh:
        json.dump(spec.to_json(), fh, indent=1)
    return root


def load_scene_spec(scene_dir) -> SceneSpec:
    with open(Path(scene_dir) / "spec.json") as fh:
        return SceneSpec.from_json(json.load(fh))

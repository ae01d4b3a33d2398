"""Objectives, synthetic training data and the optimisation loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .core import DotError, NoVisibleTracksError, TrackSet
from .interp import interpolate_bucketed, zero_estimate
from .refiner import Refiner, RefinerConfig, save_checkpoint
from .seeding import SamplingBudget, flow_edges, sample_queries, uniform_queries
from .synthgen import CorruptionSpec, SceneOracle, generate, random_scene

log = logging.getLogger(__name__)

BCE_EPS = 1e-3


class TrainingDiverged(DotError, RuntimeError):
    pass


@dataclass
class LossReport:
    flow_l1: torch.Tensor
    mask_bce: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.flow_l1 + self.mask_bce

    def as_floats(self) -> dict:
        fl, mb = float(self.flow_l1.detach()), float(self.mask_bce.detach())
        return {"flow_l1": fl, "mask_bce": mb, "total": fl + mb}


@dataclass
class SparseSupervision:
    points: torch.Tensor  # [B, S, 2] source positions (x, y)
    flow: torch.Tensor  # [B, S, 2] displacement to t
    vis: torch.Tensor  # [B, S] visibility at t


@dataclass
class DenseSupervision:
    flow: torch.Tensor  # [B, 2, H, W]
    vis: torch.Tensor  # [B, 1, H, W]


def sample_at(field: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Bilinear samples of [B, C, H, W] at pixel positions [B, S, 2] -> [B, S, C]."""
    H, W = field.shape[-2:]
    gx = 2 * points[..., 0] / max(W - 1, 1) - 1
    gy = 2 * points[..., 1] / max(H - 1, 1) - 1
    grid = torch.stack([gx, gy], dim=-1)[:, :, None]  # [B, S, 1, 2]
    out = F.grid_sample(field, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out[..., 0].permute(0, 2, 1)


def _bce(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p))


def compute_loss(pred_flow: torch.Tensor, pred_mask: torch.Tensor, supervision) -> LossReport:
    """Mean L1 flow error (over points and both components) plus mean mask BCE."""
    if isinstance(supervision, SparseSupervision):
        if supervision.points.numel() == 0:
            raise ValueError("no supervision points")
        f = sample_at(pred_flow, supervision.points)
        m = sample_at(pred_mask, supervision.points)[..., 0]
        flow_l1 = (f - supervision.flow).abs().mean()
        mask_bce = _bce(m, supervision.vis).mean()
    else:
        if supervision.flow.numel() == 0:
            raise ValueError("no supervision points")
        flow_l1 = (pred_flow - supervision.flow).abs().mean()
        mask_bce = _bce(pred_mask, supervision.vis).mean()
    return LossReport(flow_l1=flow_l1, mask_bce=mask_bce)


# ----------------------------------------------------------------------------
# Configuration and data
# ----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    steps: int = 4000
    batch_size: int = 4
    n_input: int = 64
    n_supervision: int = 1024
    supervision: str = "sparse"  # sparse | dense
    track_source: str = "gt-corrupt"  # gt | gt-corrupt
    corruption_sigma: float = 1.0
    corruption_flip: float = 0.05
    sampling: str = "motion"  # motion | uniform
    init: str = "tracks"  # tracks | zeros
    source_first_prob: float = 0.5
    num_videos: int = 500
    video_seed: int = 0
    T: int = 8
    H: int = 64
    W: int = 64
    seed: int = 0
    checkpoint_every: int = 1000

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib

            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        else:
            with open(path) as fh:
                doc = json.load(fh)
        return cls(**doc.get("train", doc))

    def corruption(self, seed: int) -> Optional[CorruptionSpec]:
        if self.track_source == "gt":
            return None
        if self.track_source != "gt-corrupt":
            raise ValueError(f"unknown track source {self.track_source!r}")
        return CorruptionSpec(self.corruption_sigma, self.corruption_flip, seed)


class SceneBank:
    """Generated videos, their oracles and motion-edge maps, created on first use."""

    def __init__(self, num_videos: int, seed: int = 0, T: int = 8, H: int = 64, W: int = 64,
                 motion_blur: bool = False):
        self.seeds = [seed + i for i in range(num_videos)]
        self.T, self.H, self.W = T, H, W
        self.motion_blur = motion_blur
        self._cache = {}

    def __len__(self):
        return len(self.seeds)

    def __getitem__(self, i):
        if i not in self._cache:
            spec = random_scene(self.seeds[i], T=self.T, H=self.H, W=self.W, motion_blur=self.motion_blur)
            video, oracle = generate(spec)
            pair_flows = np.stack([oracle.flow(t, t + 1) for t in range(spec.T - 1)])
            self._cache[i] = (video, oracle, flow_edges(pair_flows, video))
        return self._cache[i]


def select_queries(edges, n: int, sampling: str, seed: int):
    H, W = edges.edges.shape
    if sampling == "motion":
        return sample_queries(edges, SamplingBudget(n), seed).points
    if sampling == "uniform":
        return uniform_queries(H, W, n, seed).points
    raise ValueError(f"unknown sampling mode {sampling!r}")


def coarse_init(tracks: Optional[TrackSet], s: int, t: int, H: int, W: int, P: int, init: str = "tracks"):
    if init == "zeros" or tracks is None:
        return zero_estimate(H, W, P)
    try:
        return interpolate_bucketed(tracks, s, t, H, W, P)
    except NoVisibleTracksError:
        return zero_estimate(H, W, P)


def sample_pair(rng: np.random.Generator, T: int, source_first_prob: float = 0.5):
    s = 0 if rng.random() < source_first_prob else int(rng.integers(T))
    t = int(rng.integers(T - 1))
    return s, t if t < s else t + 1


def make_batch(bank: SceneBank, cfg: TrainConfig, P: int, step: int):
    """Deterministic training batch for a given step."""
    rng = np.random.default_rng([cfg.seed, step])
    img1, img2, f0, m0 = [], [], [], []
    pts, flows, vis = [], [], []
    dense_f, dense_v = [], []
    for b in range(cfg.batch_size):
        i = int(rng.integers(len(bank)))
        video, oracle, edges = bank[i]
        s, t = sample_pair(rng, video.T, cfg.source_first_prob)
        sub_seed = int(rng.integers(2 ** 31))
        tracks = None
        if cfg.init == "tracks":
            queries = select_queries(edges, cfg.n_input, cfg.sampling, sub_seed)
            tracks = oracle.tracks(queries, 0, corruption=cfg.corruption(sub_seed + 1))
        est = coarse_init(tracks, s, t, video.H, video.W, P, cfg.init)
        img1.append(video.frames[s])
        img2.append(video.frames[t])
        f0.append(est.flow0)
        m0.append(est.mask0)
        if cfg.supervision == "dense":
            fl, vi = oracle.flow_and_vis(s, t)
            dense_f.append(fl)
            dense_v.append(vi)
        else:
            idx = rng.choice(video.H * video.W, size=min(cfg.n_supervision, video.H * video.W), replace=False)
            q = np.stack([idx % video.W, idx // video.W], axis=-1).astype(np.float64)
            xt, yt, v = oracle.visibility(q[:, 0], q[:, 1], s, t)
            pts.append(q)
            flows.append(np.stack([xt - q[:, 0], yt - q[:, 1]], axis=-1))
            vis.append(v)

    def t_img(xs):
        return torch.from_numpy(np.stack(xs)).permute(0, 3, 1, 2).float().contiguous()

    inputs = (t_img(img1), t_img(img2), t_img(f0), torch.from_numpy(np.stack(m0))[:, None].float())
    if cfg.supervision == "dense":
        sup = DenseSupervision(t_img(dense_f), torch.from_numpy(np.stack(dense_v))[:, None].float())
    else:
        sup = SparseSupervision(
            torch.from_numpy(np.stack(pts)).float(),
            torch.from_numpy(np.stack(flows)).float(),
            torch.from_numpy(np.stack(vis)).float(),
        )
    return inputs, sup


# ----------------------------------------------------------------------------
# Loop
# ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Refiner
    curve: List[dict] = field(default_factory=list)


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def build_model(refiner_cfg: RefinerConfig, seed: int) -> Refiner:
    set_deterministic(seed)
    return Refiner(refiner_cfg)


def write_curve(curve: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "flow_l1", "mask_bce", "total"])
        w.writeheader()
        for row in curve:
            w.writerow({k: row[k] for k in w.fieldnames})


def train(cfg: TrainConfig, refiner_cfg: RefinerConfig, bank: Optional[SceneBank] = None,
          out_dir=None, model: Optional[Refiner] = None,
          batch_fn: Optional[Callable[[int], tuple]] = None, log_every: int = 100) -> TrainResult:
    """Adam at a fixed learning rate on the summed flow L1 and mask BCE objectives."""
    if cfg.lr < 0 or cfg.steps < 1:
        raise ValueError("need lr >= 0 and steps >= 1")
    if bank is None and batch_fn is None:
        bank = SceneBank(cfg.num_videos, cfg.video_seed, cfg.T, cfg.H, cfg.W)
    if model is None:
        model = build_model(refiner_cfg, cfg.seed)
    if batch_fn is None:
        batch_fn = lambda step: make_batch(bank, cfg, refiner_cfg.P, step)  # noqa: E731
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "train_config.json", "w") as fh:
            json.dump({"train": cfg.to_json(), "refiner": refiner_cfg.to_json()}, fh, indent=1)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    curve = []
    for step in range(1, cfg.steps + 1):
        inputs, sup = batch_fn(step)
        flow, mask = model(*inputs)
        report = compute_loss(flow, mask, sup)
        total = report.total
        if not torch.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at step {step}: {report.as_floats()}")
        opt.zero_grad()
        total.backward()
        opt.step()
        row = {"step": step, **report.as_floats()}
        curve.append(row)
        if step % log_every == 0 or step == 1:
            log.info("step %d flow_l1 %.4f mask_bce %.4f", step, row["flow_l1"], row["mask_bce"])
        if out and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
            save_checkpoint(model, out / "checkpoint.pt", extra={"step": step})
            write_curve(curve, out / "loss_curve.csv")
    model.eval()
    return TrainResult(model=model, curve=curve)

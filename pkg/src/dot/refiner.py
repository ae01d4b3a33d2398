"""Iterative flow and visibility refinement network.

A RAFT-style estimator that starts from a coarse flow / visibility guess
instead of zero motion. Coarse quantities live on the (H/P, W/P) grid and
coarse flow is expressed in cell units (pixels / P) inside the network.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .core import ConfigError, ShapeError, atomic_write_bytes, pad_to_multiple

MASK_LOGIT_INIT = 4.0


@dataclass(frozen=True)
class RefinerConfig:
    P: int = 4
    K: int = 4
    feature_dim: int = 256
    corr_levels: int = 4
    corr_radius: int = 4
    hidden_dim: int = 128
    motion_dim: int = 128
    encoder_dims: Tuple[int, int, int, int] = (64, 64, 96, 128)
    flow_encoder_dims: Tuple[int, int] = (128, 64)
    corr_encoder_dims: Tuple[int, int] = (256, 192)
    decoder_dim: int = 256
    upsample_dim: int = 256
    gru_kernel: int = 5

    def __post_init__(self):
        if self.P not in (4, 8):
            raise ConfigError(f"P must be 4 or 8, got {self.P}")
        if self.K < 0:
            raise ConfigError("K must be non-negative")
        if self.motion_dim <= 3:
            raise ConfigError("motion_dim must exceed 3 (flow + mask are appended)")

    @property
    def corr_dim(self) -> int:
        return self.corr_levels * (2 * self.corr_radius + 1) ** 2

    @property
    def combined_dim(self) -> int:
        return self.motion_dim - 3

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "RefinerConfig":
        doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
        return cls(**doc)

    def fingerprint(self, ignore=("K",)) -> str:
        """Hash of the fields that determine the weight layout."""
        doc = {k: v for k, v in self.to_json().items() if k not in ignore}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RefinerConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def toy(cls, **kw) -> "RefinerConfig":
        """Narrow variant for desk-scale CPU training."""
        base = dict(feature_dim=64, hidden_dim=64, motion_dim=64, encoder_dims=(32, 32, 48, 64),
                    flow_encoder_dims=(64, 32), corr_encoder_dims=(96, 64), decoder_dim=96, upsample_dim=96)
        base.update(kw)
        return cls(**base)

    @classmethod
    def reduced(cls, **kw) -> "RefinerConfig":
        """Tiny variant used for finite-difference gradient checks."""
        base = dict(feature_dim=32, hidden_dim=32, motion_dim=32, corr_levels=2, corr_radius=2,
                    encoder_dims=(8, 8, 12, 16), flow_encoder_dims=(16, 8), corr_encoder_dims=(16, 16),
                    decoder_dim=16, upsample_dim=16, K=2)
        base.update(kw)
        return cls(**base)


# ----------------------------------------------------------------------------
# Building blocks
# ----------------------------------------------------------------------------


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(out_ch)
        self.norm2 = nn.InstanceNorm2d(out_ch)
        if stride == 1 and in_ch == out_ch:
            self.downsample = None
        else:
            self.downsample = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride), nn.InstanceNorm2d(out_ch))

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = F.relu(self.norm2(self.conv2(y)))
        if self.downsample is not None:
            x = self.downsample(x)
        return F.relu(x + y)


class FrameEncoder(nn.Module):
    """Residual CNN mapping [B, 3, H, W] frames to [B, D, H/P, W/P] features.

    P=4 uses stride 1 in the first 7x7 convolution, P=8 uses stride 2.
    """

    def __init__(self, cfg: RefinerConfig):
        super().__init__()
        c0, c1, c2, c3 = cfg.encoder_dims
        self.conv1 = nn.Conv2d(3, c0, 7, stride=cfg.P // 4, padding=3)
        self.norm1 = nn.InstanceNorm2d(c0)
        self.layer1 = ResidualBlock(c0, c1, 1)
        self.layer2 = ResidualBlock(c1, c2, 2)
        self.layer3 = ResidualBlock(c2, c3, 2)
        self.conv2 = nn.Conv2d(c3, cfg.feature_dim, 1)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        x = self.layer3(self.layer2(self.layer1(x)))
        return self.conv2(x)


class JointEncoder(nn.Module):
    """Encodes current flow, mask and correlation samples into motion features."""

    def __init__(self, cfg: RefinerConfig):
        super().__init__()
        f1, f2 = cfg.flow_encoder_dims
        c1, c2 = cfg.corr_encoder_dims
        self.convf1 = nn.Conv2d(3, f1, 7, padding=3)
        self.convf2 = nn.Conv2d(f1, f2, 3, padding=1)
        self.convc1 = nn.Conv2d(cfg.corr_dim, c1, 1)
        self.convc2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.conv = nn.Conv2d(f2 + c2, cfg.combined_dim, 3, padding=1)

    def forward(self, flow, mask, corr):
        fm = torch.cat([flow, mask], dim=1)
        f = F.relu(self.convf2(F.relu(self.convf1(fm))))
        c = F.relu(self.convc2(F.relu(self.convc1(corr))))
        out = F.relu(self.conv(torch.cat([f, c], dim=1)))
        return torch.cat([out, flow, mask], dim=1)


class SepConvGRU(nn.Module):
    """GRU cell with a horizontal (1 x k) pass followed by a vertical (k x 1) pass."""

    def __init__(self, hidden_dim, input_dim, k=5):
        super().__init__()
        ch = hidden_dim + input_dim
        p = k // 2
        self.convz1 = nn.Conv2d(ch, hidden_dim, (1, k), padding=(0, p))
        self.convr1 = nn.Conv2d(ch, hidden_dim, (1, k), padding=(0, p))
        self.convq1 = nn.Conv2d(ch, hidden_dim, (1, k), padding=(0, p))
        self.convz2 = nn.Conv2d(ch, hidden_dim, (k, 1), padding=(p, 0))
        self.convr2 = nn.Conv2d(ch, hidden_dim, (k, 1), padding=(p, 0))
        self.convq2 = nn.Conv2d(ch, hidden_dim, (k, 1), padding=(p, 0))

    @staticmethod
    def _step(h, x, convz, convr, convq):
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(convz(hx))
        r = torch.sigmoid(convr(hx))
        q = torch.tanh(convq(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * q

    def forward(self, h, x):
        h = self._step(h, x, self.convz1, self.convr1, self.convq1)
        return self._step(h, x, self.convz2, self.convr2, self.convq2)


class Head(nn.Module):
    def __init__(self, in_dim, hidden, out_dim, zero_init=True):
        super().__init__()
        self.conv1 = nn.Conv2d(in_dim, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, out_dim, 3, padding=1)
        if zero_init:
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return self.conv2(F.relu(self.conv1(x)))


# ----------------------------------------------------------------------------
# Correlation pyramid and lookup
# ----------------------------------------------------------------------------


def build_pyramid(fmap1: torch.Tensor, fmap2: torch.Tensor, levels: int) -> List[torch.Tensor]:
    """All-pairs correlation <Y_s(x), Y_t(x')> / sqrt(D), pooled 2x2 over target dims.

    Level l has shape [B*h*w, 1, h/2^l, w/2^l].
    """
    if fmap1.shape != fmap2.shape:
        raise ShapeError(f"feature shapes differ: {tuple(fmap1.shape)} vs {tuple(fmap2.shape)}")
    B, D, h, w = fmap1.shape
    corr = torch.einsum("bdn,bdm->bnm", fmap1.reshape(B, D, h * w), fmap2.reshape(B, D, h * w))
    corr = corr.reshape(B * h * w, 1, h, w) / math.sqrt(D)
    pyramid = [corr]
    for _ in range(levels - 1):
        if min(corr.shape[-2:]) < 2:
            corr = corr.mean(dim=(-2, -1), keepdim=True) if min(corr.shape[-2:]) > 0 else corr
        else:
            corr = F.avg_pool2d(corr, 2, stride=2)
        pyramid.append(corr)
    return pyramid


def bilinear_zeros(img: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample img [N, C, H, W] at index coordinates x, y [N, Ho, Wo]; outside reads 0."""
    H, W = img.shape[-2:]
    gx = (2 * x + 1) / W - 1
    gy = (2 * y + 1) / H - 1
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def lookup(pyramid: Sequence[torch.Tensor], flow: torch.Tensor, radius: int) -> torch.Tensor:
    """Sample each level on a (2r+1)^2 unit grid centred at (cell + flow) / 2^l.

    flow is [B, 2, h, w] in cell units. Returns [B, L*(2r+1)^2, h, w] with
    channels ordered level, then dy, then dx.
    """
    B, _, h, w = flow.shape
    ys, xs = torch.meshgrid(torch.arange(h, dtype=flow.dtype), torch.arange(w, dtype=flow.dtype), indexing="ij")
    cx = (xs[None] + flow[:, 0]).reshape(B * h * w, 1, 1)
    cy = (ys[None] + flow[:, 1]).reshape(B * h * w, 1, 1)
    d = torch.arange(-radius, radius + 1, dtype=flow.dtype)
    dy, dx = torch.meshgrid(d, d, indexing="ij")
    out = []
    for lvl, corr in enumerate(pyramid):
        scale = 2 ** lvl
        sx = cx / scale + dx[None]
        sy = cy / scale + dy[None]
        samp = bilinear_zeros(corr, sx, sy)  # [B*h*w, 1, 2r+1, 2r+1]
        out.append(samp.reshape(B, h, w, -1))
    return torch.cat(out, dim=-1).permute(0, 3, 1, 2).contiguous()


def convex_upsample(x: torch.Tensor, weights: torch.Tensor, P: int) -> torch.Tensor:
    """Each fine pixel is a softmax-weighted mix of its 9 coarse neighbours.

    x: [B, C, h, w]; weights: [B, 9*P*P, h, w] logits. Borders are replicated.
    """
    B, C, h, w = x.shape
    wts = torch.softmax(weights.view(B, 1, 9, P, P, h, w), dim=2)
    xp = F.pad(x, (1, 1, 1, 1), mode="replicate")
    patches = F.unfold(xp, 3).view(B, C, 9, 1, 1, h, w)
    up = (wts * patches).sum(dim=2)  # [B, C, P, P, h, w]
    return up.permute(0, 1, 4, 2, 5, 3).reshape(B, C, h * P, w * P)


def nearest_upsample(x: torch.Tensor, P: int) -> torch.Tensor:
    return x.repeat_interleave(P, dim=-2).repeat_interleave(P, dim=-1)


# ----------------------------------------------------------------------------
# Network
# ----------------------------------------------------------------------------


@dataclass
class RefinerState:
    hidden: torch.Tensor
    flow: torch.Tensor  # coarse, cell units
    mask_logits: torch.Tensor
    k: int = 0


class Refiner(nn.Module):
    def __init__(self, cfg: RefinerConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = FrameEncoder(cfg)
        self.hidden_proj = nn.Conv2d(cfg.feature_dim, cfg.hidden_dim, 1)
        self.joint = JointEncoder(cfg)
        self.gru = SepConvGRU(cfg.hidden_dim, cfg.motion_dim + cfg.feature_dim, cfg.gru_kernel)
        self.flow_head = Head(cfg.hidden_dim, cfg.decoder_dim, 2)
        self.mask_head = Head(cfg.hidden_dim, cfg.decoder_dim, 1)
        self.upsample_head = nn.Sequential(
            nn.Conv2d(cfg.hidden_dim, cfg.upsample_dim, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(cfg.upsample_dim, 9 * cfg.P * cfg.P, 1),
        )

    def encode(self, img1, img2):
        """Shared-weight features for both frames; images in [0, 1]."""
        both = torch.cat([img1, img2], dim=0) * 2.0 - 1.0
        feats = self.encoder(both)
        return feats[: img1.shape[0]], feats[img1.shape[0]:]

    def init_state(self, fmap1, flow0, mask0) -> RefinerState:
        h = torch.tanh(self.hidden_proj(fmap1))
        logits = MASK_LOGIT_INIT * (2.0 * mask0 - 1.0)
        return RefinerState(hidden=h, flow=flow0 / self.cfg.P, mask_logits=logits)

    def step(self, state: RefinerState, pyramid, context) -> RefinerState:
        corr = lookup(pyramid, state.flow, self.cfg.corr_radius)
        motion = self.joint(state.flow, torch.sigmoid(state.mask_logits), corr)
        h = self.gru(state.hidden, torch.cat([motion, context], dim=1))
        return RefinerState(
            hidden=h,
            flow=state.flow + self.flow_head(h),
            mask_logits=state.mask_logits + self.mask_head(h),
            k=state.k + 1,
        )

    def forward(self, img1, img2, flow0, mask0, iters: Optional[int] = None):
        """Refine coarse estimates.

        img1, img2: [B, 3, H, W] in [0, 1] with H, W divisible by P.
        flow0: [B, 2, H/P, W/P] in pixels; mask0: [B, 1, H/P, W/P] in [0, 1].
        Returns fine flow [B, 2, H, W] in pixels and soft mask [B, 1, H, W].
        """
        P = self.cfg.P
        K = self.cfg.K if iters is None else iters
        H, W = img1.shape[-2:]
        if H % P or W % P:
            raise ShapeError(f"frame size {H}x{W} not divisible by P={P}")
        if flow0.shape[-2:] != (H // P, W // P):
            raise ShapeError(f"coarse estimate {tuple(flow0.shape[-2:])} does not match {(H // P, W // P)}")
        if K == 0:
            return nearest_upsample(flow0, P), nearest_upsample(mask0, P)
        fmap1, fmap2 = self.encode(img1, img2)
        pyramid = build_pyramid(fmap1, fmap2, self.cfg.corr_levels)
        state = self.init_state(fmap1, flow0, mask0)
        for _ in range(K):
            state = self.step(state, pyramid, fmap1)
        up_w = self.upsample_head(state.hidden)
        flow = convex_upsample(P * state.flow, up_w, P)
        logits = convex_upsample(state.mask_logits, up_w, P)
        return flow, torch.sigmoid(logits)


# ----------------------------------------------------------------------------
# numpy-facing helpers
# ----------------------------------------------------------------------------


def _to_tensor_img(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(x, dtype=np.float32)).permute(2, 0, 1)[None]


def _reflect_pad(img: np.ndarray, Hp: int, Wp: int) -> np.ndarray:
    H, W = img.shape[:2]
    if (H, W) == (Hp, Wp):
        return img
    pad = [(0, Hp - H), (0, Wp - W)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, pad, mode="reflect" if min(H, W) > 1 else "edge")


def encode_frames(model: Refiner, X_s: np.ndarray, X_t: np.ndarray):
    """Features [H/P, W/P, D] for both frames."""
    if X_s.shape != X_t.shape:
        raise ShapeError(f"frame shapes differ: {X_s.shape} vs {X_t.shape}")
    H, W = X_s.shape[:2]
    if H % model.cfg.P or W % model.cfg.P:
        raise ShapeError(f"frame size {H}x{W} not divisible by P={model.cfg.P}")
    with torch.no_grad():
        y1, y2 = model.encode(_to_tensor_img(X_s), _to_tensor_img(X_t))
    return y1[0].permute(1, 2, 0).numpy(), y2[0].permute(1, 2, 0).numpy()


@torch.no_grad()
def refine(model: Refiner, X_s: np.ndarray, X_t: np.ndarray, F0: np.ndarray, M0: np.ndarray,
           iters: Optional[int] = None):
    """Refine a coarse estimate into fine flow [H, W, 2] and soft mask [H, W].

    F0 is [h, w, 2] in pixels and M0 is [h, w] with h = ceil(H/P); frames whose
    size is not a multiple of P are reflect-padded and outputs cropped back.
    """
    P = model.cfg.P
    H, W = X_s.shape[:2]
    Hp, Wp = pad_to_multiple(H, W, P)
    if F0.shape[:2] != (Hp // P, Wp // P) or M0.shape != (Hp // P, Wp // P):
        raise ShapeError(f"coarse estimate {F0.shape[:2]} does not match {(Hp // P, Wp // P)}")
    img1 = _to_tensor_img(_reflect_pad(X_s, Hp, Wp))
    img2 = _to_tensor_img(_reflect_pad(X_t, Hp, Wp))
    f0 = torch.from_numpy(np.ascontiguousarray(F0, dtype=np.float32)).permute(2, 0, 1)[None]
    m0 = torch.from_numpy(np.ascontiguousarray(M0, dtype=np.float32))[None, None]
    was_training = model.training
    model.eval()
    flow, mask = model(img1, img2, f0, m0, iters=iters)
    model.train(was_training)
    return flow[0].permute(1, 2, 0).numpy()[:H, :W], mask[0, 0].numpy()[:H, :W]


def bilinear_sample_np(field: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an [H, W, C] array at (x, y) with clamped borders."""
    coords = [np.asarray(y, dtype=np.float64), np.asarray(x, dtype=np.float64)]
    return np.stack([ndimage.map_coordinates(field[..., c].astype(np.float64), coords, order=1, mode="nearest")
                     for c in range(field.shape[-1])], axis=-1)


def chain_flows(pair_flows: Sequence[np.ndarray], shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Compose consecutive-pair flows by resampling and summation."""
    if len(pair_flows) == 0:
        if shape is None:
            raise ValueError("an empty chain needs an explicit shape")
        return np.zeros((*shape, 2), np.float32)
    total = np.asarray(pair_flows[0], dtype=np.float64)
    H, W = total.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    for f in pair_flows[1:]:
        total = total + bilinear_sample_np(np.asarray(f), xs + total[..., 0], ys + total[..., 1])
    return total.astype(np.float32)


def downsample_flow(flow: np.ndarray, P: int) -> np.ndarray:
    """Average-pool a fine [H, W, 2] flow onto the coarse grid (H, W divisible by P)."""
    H, W = flow.shape[:2]
    return flow.reshape(H // P, P, W // P, P, -1).mean(axis=(1, 3)).astype(np.float32)


def warm_start(model: Refiner, frames: np.ndarray, s: int, t: int):
    """Refine (s, s+1), (s, s+2), ... (s, t), seeding each pair with the previous result."""
    P = model.cfg.P
    H, W = frames.shape[1:3]
    Hp, Wp = pad_to_multiple(H, W, P)
    step = 1 if t >= s else -1
    flow = np.zeros((Hp // P, Wp // P, 2), np.float32)
    ones = np.ones((Hp // P, Wp // P), np.float32)
    fine, mask = np.zeros((H, W, 2), np.float32), np.ones((H, W), np.float32)
    for u in range(s + step, t + step, step):
        fine, mask = refine(model, frames[s], frames[u], flow, ones)
        flow = downsample_flow(_reflect_pad(fine, Hp, Wp), P)
    return fine, mask


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------


def save_checkpoint(model: Refiner, path, extra: Optional[dict] = None) -> None:
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    payload = {
        "config": model.cfg.to_json(),
        "fingerprint": model.cfg.fingerprint(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "state_dict": state,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path, cfg: Optional[RefinerConfig] = None) -> Refiner:
    """Load weights; if ``cfg`` is given its fingerprint must match the archive."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    saved = RefinerConfig.from_json(payload["config"])
    if payload["fingerprint"] != saved.fingerprint():
        raise ConfigError(f"{path}: stored fingerprint does not match stored config")
    if cfg is not None and cfg.fingerprint() != saved.fingerprint():
        raise ConfigError(f"{path}: checkpoint config {saved} is incompatible with {cfg}")
    model = Refiner(cfg if cfg is not None else saved)
    for k, shape in payload["shapes"].items():
        if k not in model.state_dict() or list(model.state_dict()[k].shape) != shape:
            raise ConfigError(f"{path}: weight {k} with shape {shape} does not fit the model")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model

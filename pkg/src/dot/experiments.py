"""Desk-scale ablation, track-count and timing experiments with on-disk caching.

Trained models are cached under a directory keyed by a hash of the full
training and network configuration, so repeated invocations reuse them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import TAU, binarize_mask
from .evaluation import aggregate, epe, occlusion_iou, time_harness, write_summary_csv
from .interp import interpolate_bucketed
from .pipeline import naive_per_query_refine, run_dot
from .refiner import Refiner, RefinerConfig, load_checkpoint
from .seeding import CorruptedTracker, SamplingBudget, flow_edges, sample_queries
from .synthgen import CorruptionSpec, generate, random_scene
from .training import SceneBank, TrainConfig, train

log = logging.getLogger(__name__)

# bump when a change to training code should invalidate cached models
CACHE_VERSION = 1
DEFAULT_ROOT = Path(os.environ.get("DOT_ARTIFACTS", Path(__file__).resolve().parents[2] / "artifacts"))


@dataclass(frozen=True)
class ToyProtocol:
    num_train: int = 500
    train_seed: int = 0
    num_heldout: int = 50
    heldout_seed: int = 10_000
    T: int = 8
    H: int = 64
    W: int = 64
    N: int = 64
    steps: int = 4000
    batch_size: int = 4
    seed: int = 0
    sigma: float = 1.0
    flip: float = 0.05

    def train_config(self, **kw) -> TrainConfig:
        base = TrainConfig(steps=self.steps, batch_size=self.batch_size, n_input=self.N,
                           num_videos=self.num_train, video_seed=self.train_seed, T=self.T, H=self.H,
                           W=self.W, seed=self.seed, corruption_sigma=self.sigma, corruption_flip=self.flip,
                           checkpoint_every=max(self.steps // 4, 1))
        return replace(base, **kw)


@dataclass(frozen=True)
class Variant:
    """One row of the ablation table: how the model is trained and how it is run."""

    name: str
    P: int = 4
    train_init: str = "tracks"  # tracks | zeros
    train_source: str = "gt-corrupt"
    sampling: str = "motion"  # query sampling at inference
    use_refine: bool = True
    use_tracks: bool = True

    @property
    def needs_model(self) -> bool:
        return self.use_refine


TABLE_VARIANTS = (
    Variant("full"),
    Variant("no-motion-sampling", sampling="uniform"),
    Variant("patch-8", P=8),
    Variant("no-in-domain-training", train_source="gt"),
    Variant("no-track-estimates", train_init="zeros", use_tracks=False),
    Variant("no-refinement", use_refine=False),
)
ACCEPTANCE_VARIANTS = tuple(v for v in TABLE_VARIANTS if v.name != "no-in-domain-training")


def run_key(train_cfg: TrainConfig, refiner_cfg: RefinerConfig) -> str:
    doc = {"v": CACHE_VERSION, "train": train_cfg.to_json(), "refiner": refiner_cfg.to_json()}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def read_curve(path) -> List[dict]:
    with open(path) as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def train_cached(name: str, train_cfg: TrainConfig, refiner_cfg: RefinerConfig, root=DEFAULT_ROOT,
                 bank: Optional[SceneBank] = None):
    """Train once per configuration; later calls load the stored checkpoint and curve."""
    out = Path(root) / f"{name}-{run_key(train_cfg, refiner_cfg)}"
    done = out / "DONE"
    if not done.exists():
        log.info("training %s into %s", name, out)
        if bank is None:
            bank = SceneBank(train_cfg.num_videos, train_cfg.video_seed, train_cfg.T, train_cfg.H, train_cfg.W)
        train(train_cfg, refiner_cfg, bank, out_dir=out, log_every=200)
        done.write_text("ok\n")
    model = load_checkpoint(out / "checkpoint.pt", refiner_cfg)
    return model, read_curve(out / "loss_curve.csv"), out


def model_configs(variant: Variant, protocol: ToyProtocol):
    train_cfg = protocol.train_config(init=variant.train_init, track_source=variant.train_source)
    return train_cfg, RefinerConfig.toy(P=variant.P)


def train_variants(protocol: ToyProtocol, variants: Sequence[Variant] = ACCEPTANCE_VARIANTS,
                   root=DEFAULT_ROOT) -> Dict[str, Refiner]:
    """Models for every variant, sharing weights between rows with identical training."""
    bank = SceneBank(protocol.num_train, protocol.train_seed, protocol.T, protocol.H, protocol.W)
    by_key: Dict[str, Refiner] = {}
    models: Dict[str, Refiner] = {}
    for v in variants:
        if not v.needs_model:
            continue
        train_cfg, refiner_cfg = model_configs(v, protocol)
        key = run_key(train_cfg, refiner_cfg)
        if key not in by_key:
            tag = f"{v.train_init}-{v.train_source}-P{v.P}"
            by_key[key] = train_cached(tag, train_cfg, refiner_cfg, root, bank)[0]
        models[v.name] = by_key[key]
    return models


# ----------------------------------------------------------------------------
# Held-out evaluation
# ----------------------------------------------------------------------------


class HeldOut:
    """Held-out scenes with their ground-truth pair flows, generated on demand."""

    def __init__(self, protocol: ToyProtocol):
        self.protocol = protocol
        self._cache = {}

    def __len__(self):
        return self.protocol.num_heldout

    def __getitem__(self, i):
        if i not in self._cache:
            p = self.protocol
            spec = random_scene(p.heldout_seed + i, T=p.T, H=p.H, W=p.W)
            video, oracle = generate(spec)
            pair_flows = np.stack([oracle.flow(t, t + 1) for t in range(p.T - 1)])
            self._cache[i] = (video, oracle, pair_flows)
        return self._cache[i]


def evaluate_variant(variant: Variant, model: Optional[Refiner], heldout: HeldOut, N: Optional[int] = None,
                     tau: float = TAU) -> List[dict]:
    """Per-video metrics for the first-to-last frame pair."""
    p = heldout.protocol
    N = p.N if N is None else N
    rows = []
    for i in range(len(heldout)):
        video, oracle, pair_flows = heldout[i]
        s, t = 0, video.T - 1
        tracker = CorruptedTracker(oracle, CorruptionSpec(p.sigma, p.flip, seed=p.heldout_seed + i))
        out = run_dot(video, tracker, model=model, N=N, s=s, targets=[t], sampling=variant.sampling,
                      pair_flows=pair_flows, use_refine=variant.use_refine, use_tracks=variant.use_tracks,
                      P=variant.P, seed=i)
        res = out.pairs[t]
        gt_flow, gt_vis = oracle.flow_and_vis(s, t)
        e_all, e_vis, e_occ = epe(res.flow, gt_flow, gt_vis)
        rows.append({"video": i, "epe_all": e_all, "epe_vis": e_vis, "epe_occ": e_occ,
                     "iou_occ": occlusion_iou(binarize_mask(res.mask, tau), gt_vis)})
    return rows


def ablation_table(protocol: ToyProtocol, variants: Sequence[Variant] = ACCEPTANCE_VARIANTS,
                   root=DEFAULT_ROOT, out_csv=None) -> List[dict]:
    """Aggregate metrics per variant, sorted by mean EPE."""
    models = train_variants(protocol, variants, root)
    heldout = HeldOut(protocol)
    table = []
    for v in variants:
        rows = evaluate_variant(v, models.get(v.name), heldout)
        table.append({"name": v.name, **aggregate(rows, keys=("epe_all", "epe_vis", "epe_occ", "iou_occ"))})
    table.sort(key=lambda r: r["epe_all"])
    if out_csv:
        write_summary_csv(table, out_csv, columns=["name", "epe_all", "epe_vis", "epe_occ", "iou_occ"])
    return table


def track_count_curve(protocol: ToyProtocol, counts=(16, 64, 256), root=DEFAULT_ROOT,
                      model: Optional[Refiner] = None) -> List[dict]:
    """Mean held-out EPE of the full method as the number of input tracks varies."""
    full = ACCEPTANCE_VARIANTS[0]
    if model is None:
        model = train_variants(protocol, [full], root)[full.name]
    heldout = HeldOut(protocol)
    out = []
    for n in counts:
        rows = evaluate_variant(full, model, heldout, N=n)
        out.append({"N": n, **aggregate(rows, keys=("epe_all", "iou_occ"))})
    return out


# ----------------------------------------------------------------------------
# Timing
# ----------------------------------------------------------------------------


def timing_comparison(model: Refiner, seed: int = 0, size: int = 32, T: int = 4, N: int = 64,
                      repetitions: int = 5) -> Dict[str, dict]:
    """Seconds per video for interpolation only, the full method and a naive per-cell refiner."""
    video, oracle = generate(random_scene(seed, T=T, H=size, W=size))
    pair_flows = np.stack([oracle.flow(t, t + 1) for t in range(T - 1)])
    edges = flow_edges(pair_flows, video)
    queries = sample_queries(edges, SamplingBudget(N), seed).points
    tracks = oracle.tracks(queries, 0)
    s, t = 0, T - 1
    P = model.cfg.P

    def interp_only(v):
        run_dot(v, model=None, use_refine=False, s=s, targets=[t], tracks=tracks, P=P)

    def full(v):
        run_dot(v, model=model, s=s, targets=[t], tracks=tracks)

    def naive(v):
        est = interpolate_bucketed(tracks, s, t, v.H, v.W, P)
        naive_per_query_refine(model, v, s, t, est)

    results = {}
    for name, fn in (("interpolation-only", interp_only), ("dot", full), ("naive-per-query", naive)):
        r = time_harness(fn, [(video,)], repetitions=repetitions)
        results[name] = asdict(r)
    return results


def save_json(doc, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)

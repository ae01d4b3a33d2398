"""Command-line interface: ``dot generate | train | track | eval | ablate | plot``.

Exit codes: 0 success, 1 usage error, 2 partial result, 3 failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from .core import (
    TAU,
    DotError,
    load_video_dir,
    read_flo,
    read_mask_png,
    read_tracks,
    write_flo,
    write_mask_png,
    write_tracks,
)

log = logging.getLogger("dot")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_FAILURE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def _prepare_out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to write into it)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _int_list(text: str) -> List[int]:
    return [int(x) for x in text.split(",") if x.strip()]


# ----------------------------------------------------------------------------
# generate
# ----------------------------------------------------------------------------


def _generate_one(job):
    from .synthgen import preset_scene, write_scene

    preset, seed, H, W, out = job
    return str(write_scene(preset_scene(preset, seed, H, W), out))


def cmd_generate(args) -> int:
    from .synthgen import PRESETS

    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    out = _prepare_out_dir(args.out, args.force)
    jobs = [(args.preset, args.seed + i, args.height, args.width, str(out)) for i in range(args.num_scenes)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            written = list(pool.map(_generate_one, jobs))
    else:
        written = [_generate_one(j) for j in jobs]
    log.info("wrote %d scenes to %s", len(written), out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# train
# ----------------------------------------------------------------------------


def cmd_train(args) -> int:
    import torch

    from .refiner import RefinerConfig
    from .training import SceneBank, TrainConfig, train

    torch.set_num_threads(max(args.workers, 1))
    out = _prepare_out_dir(args.out, args.force)
    cfg = TrainConfig(lr=args.lr, steps=args.steps, batch_size=args.batch_size, n_input=args.num_tracks,
                      n_supervision=args.num_supervision, supervision=args.supervision,
                      track_source=args.track_source, sampling=args.sampling, init=args.init,
                      num_videos=args.num_videos, video_seed=args.seed, T=args.frames, H=args.height,
                      W=args.width, seed=args.seed, checkpoint_every=args.checkpoint_every)
    size = RefinerConfig.toy if args.model_size == "toy" else RefinerConfig
    rcfg = size(P=args.patch, K=args.iters)
    bank = SceneBank(cfg.num_videos, cfg.video_seed, cfg.T, cfg.H, cfg.W)
    res = train(cfg, rcfg, bank, out_dir=out, log_every=args.log_every)
    last = res.curve[-1]
    log.info("done: step %d flow_l1 %.4f mask_bce %.4f", last["step"], last["flow_l1"], last["mask_bce"])
    return EXIT_OK


# ----------------------------------------------------------------------------
# track
# ----------------------------------------------------------------------------


def _resolve_video(path: Path):
    frames = path / "frames" if (path / "frames").is_dir() else path
    return load_video_dir(frames), (path if (path / "spec.json").exists() else None)


def _make_tracker(args, scene_dir):
    from .seeding import CorruptedTracker, ExternalTracker, GroundTruthTracker
    from .synthgen import CorruptionSpec, generate, load_scene_spec

    if args.tracker == "external":
        if not args.tracks_file:
            raise UsageError("--tracker external needs --tracks-file")
        return ExternalTracker(Path(args.out) / "external", args.tracks_file), None
    if scene_dir is None:
        raise UsageError(f"--tracker {args.tracker} needs a generated scene directory containing spec.json")
    _, oracle = generate(load_scene_spec(scene_dir))
    if args.tracker == "gt":
        return GroundTruthTracker(oracle, args.source), oracle
    return CorruptedTracker(oracle, CorruptionSpec(args.sigma, args.flip_prob, args.seed), args.source), oracle


def cmd_track(args) -> int:
    from .pipeline import model_pair_flows, run_dot
    from .refiner import load_checkpoint

    if args.no_refine and args.no_tracks:
        raise UsageError("--no-refine and --no-tracks together leave nothing to compute")
    model = None
    if not args.no_refine:
        if not args.checkpoint or not Path(args.checkpoint).exists():
            raise UsageError("refinement needs an existing --checkpoint (or pass --no-refine)")
        model = load_checkpoint(args.checkpoint)
    video, scene_dir = _resolve_video(Path(args.video))
    if not 0 <= args.source < video.T:
        raise UsageError(f"source frame {args.source} outside [0, {video.T})")
    targets = [t for t in range(video.T) if t != args.source] if args.targets == "all" else _int_list(args.targets)
    if any(not 0 <= t < video.T for t in targets):
        raise UsageError(f"targets {targets} outside [0, {video.T})")
    out = _prepare_out_dir(args.out, args.force)

    tracker, oracle, pair_flows = None, None, None
    if not args.no_tracks:
        tracker, oracle = _make_tracker(args, scene_dir)
        if args.sampling == "motion":
            if oracle is not None:
                pair_flows = np.stack([oracle.flow(t, t + 1) for t in range(video.T - 1)])
            elif model is not None:
                pair_flows = model_pair_flows(model, video)
    res = run_dot(video, tracker, model=model, N=args.num_tracks, s=args.source, targets=targets,
                  sampling=args.sampling, pair_flows=pair_flows, use_refine=not args.no_refine,
                  use_tracks=not args.no_tracks, P=args.patch if model is None else None, seed=args.seed)
    for t, pr in res.pairs.items():
        write_flo(pr.flow, out / f"flow_{args.source}_{t}.flo")
        write_mask_png(pr.binary_mask(args.tau), out / f"vis_{args.source}_{t}.png")
        np.save(out / f"mask_{args.source}_{t}.npy", pr.mask.astype(np.float32))
    if res.tracks is not None:
        write_tracks(res.tracks, out / "tracks.json")
    if res.queries is not None:
        with open(out / "queries.json", "w") as fh:
            json.dump(res.queries.tolist(), fh)
    if res.fallback_sampling:
        log.warning("no motion edges found; queries were sampled uniformly")
    log.info("wrote %d flow fields to %s", len(res.pairs), out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------------


def _scene_pairs(pred_dir: Path, gt_dir: Path):
    """(name, pred_dir, gt_dir) triples: a single scene or a dataset of scene_* folders."""
    if (gt_dir / "gt").is_dir():
        return [(gt_dir.name, pred_dir, gt_dir / "gt")]
    scenes = sorted(p for p in gt_dir.iterdir() if p.is_dir() and (p / "gt").is_dir())
    if scenes:
        return [(s.name, pred_dir / s.name, s / "gt") for s in scenes]
    return [(gt_dir.name, pred_dir, gt_dir)]


def cmd_eval(args) -> int:
    from .evaluation import aggregate, epe, occlusion_iou, write_report

    out = _prepare_out_dir(args.out, args.force)
    rows, missing = [], []
    for name, pdir, gdir in _scene_pairs(Path(args.pred), Path(args.gt)):
        for gflow in sorted(gdir.glob("flow_*_*.flo")):
            pair = gflow.stem[len("flow_"):]
            pflow, pvis = pdir / f"flow_{pair}.flo", pdir / f"vis_{pair}.png"
            gvis = gdir / f"vis_{pair}.png"
            if not (pflow.exists() and pvis.exists() and gvis.exists()):
                missing.append(f"{name}/{pair}")
                continue
            gt_vis = read_mask_png(gvis)
            e_all, e_vis, e_occ = epe(read_flo(pflow), read_flo(gflow), gt_vis)
            rows.append({"scene": name, "pair": pair, "epe_all": e_all, "epe_vis": e_vis, "epe_occ": e_occ,
                         "iou_occ": occlusion_iou(read_mask_png(pvis), gt_vis)})
    summary = aggregate(rows, keys=("epe_all", "epe_vis", "epe_occ", "iou_occ"))
    summary["num_pairs"] = len(rows)
    summary["missing"] = missing
    write_report(rows, summary, out / "report.json", out / "summary.csv")
    for m in missing:
        log.warning("missing prediction or ground truth for %s", m)
    if not rows:
        log.error("no pairs evaluated")
        return EXIT_FAILURE
    log.info("EPE all %.4f  IoU occ %.4f over %d pairs", summary["epe_all"], summary["iou_occ"], len(rows))
    return EXIT_PARTIAL if missing else EXIT_OK


# ----------------------------------------------------------------------------
# ablate
# ----------------------------------------------------------------------------


def cmd_ablate(args) -> int:
    import torch

    from .experiments import DEFAULT_ROOT, TABLE_VARIANTS, ToyProtocol, ablation_table, save_json, track_count_curve

    torch.set_num_threads(max(args.workers, 1))
    out = _prepare_out_dir(args.out, args.force)
    names = {v.name: v for v in TABLE_VARIANTS}
    wanted = args.variants.split(",") if args.variants else [v.name for v in TABLE_VARIANTS]
    unknown = [w for w in wanted if w not in names]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {sorted(names)}")
    protocol = ToyProtocol(num_train=args.num_videos, num_heldout=args.num_heldout, steps=args.steps,
                           N=args.num_tracks, seed=args.seed, batch_size=args.batch_size)
    root = Path(args.cache) if args.cache else DEFAULT_ROOT
    table = ablation_table(protocol, [names[w] for w in wanted], root, out / "ablation.csv")
    curve = track_count_curve(protocol, _int_list(args.counts), root) if args.counts else []
    if curve:
        with open(out / "n_curve.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["N", "epe_all", "iou_occ"])
            w.writeheader()
            w.writerows(curve)
    save_json({"protocol": protocol.__dict__, "table": table, "n_curve": curve}, out / "ablation.json")
    for row in table:
        log.info("%-24s EPE %.3f  IoU %.3f", row["name"], row["epe_all"], row["iou_occ"])
    return EXIT_OK


# ----------------------------------------------------------------------------
# plot
# ----------------------------------------------------------------------------

FIGURES = ("flow", "mask", "tracks", "n-curve", "p-curve", "report")


def _read_csv(path) -> List[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def cmd_plot(args) -> int:
    from . import plots

    wanted = args.figures.split(",") if args.figures else list(FIGURES)
    bad = [w for w in wanted if w not in FIGURES]
    if bad:
        raise UsageError(f"unknown figures {bad}; choose from {list(FIGURES)}")
    src = Path(args.input)
    if not src.exists():
        raise UsageError(f"input {src} does not exist")
    out = _prepare_out_dir(args.out, args.force)
    made, skipped = [], []

    def want(kind, available):
        if kind in wanted and not available:
            skipped.append(kind)
        return kind in wanted and available

    flows = sorted(src.glob("flow_*.flo"))
    if want("flow", bool(flows)):
        for f in flows:
            made.append(plots.save_flow_png(read_flo(f), out / f"{f.stem}.png"))
    masks = sorted(src.glob("mask_*.npy"))
    if want("mask", bool(masks)):
        from PIL import Image

        for m in masks:
            img = (np.clip(np.load(m), 0, 1) * 255).round().astype(np.uint8)
            Image.fromarray(img).save(out / f"{m.stem}.png")
            made.append(out / f"{m.stem}.png")
    frames_dir = Path(args.video) / "frames" if args.video and (Path(args.video) / "frames").is_dir() else (
        Path(args.video) if args.video else None)
    if want("tracks", (src / "tracks.json").exists() and frames_dir is not None):
        video = load_video_dir(frames_dir)
        tracks = read_tracks(src / "tracks.json")
        for t in range(video.T):
            made.append(plots.save_track_overlay(video.frames[t], tracks, t, out / f"tracks_{t:04d}.png", s=0))
    if want("n-curve", (src / "n_curve.csv").exists()):
        rows = _read_csv(src / "n_curve.csv")
        made.append(plots.save_curve([int(r["N"]) for r in rows], [float(r["epe_all"]) for r in rows],
                                     out / "n_vs_epe.png", "number of tracks N", logx=True))
    table = _read_csv(src / "ablation.csv") if (src / "ablation.csv").exists() else []
    by_name = {r["name"]: r for r in table}
    if want("p-curve", "full" in by_name and "patch-8" in by_name):
        made.append(plots.save_curve([4, 8], [float(by_name["full"]["epe_all"]),
                                              float(by_name["patch-8"]["epe_all"])],
                                     out / "p_vs_epe.png", "patch size P"))
    if want("report", (src / "report.json").exists() or bool(table)):
        if (src / "report.json").exists():
            rows = json.loads((src / "report.json").read_text())["per_video"]
            names = [f"{r.get('scene', '')}:{r.get('pair', r.get('video', ''))}" for r in rows]
            made.append(plots.save_bars(names, [r["epe_all"] for r in rows], out / "report_epe.png"))
        else:
            made.append(plots.save_bars([r["name"] for r in table], [float(r["epe_all"]) for r in table],
                                        out / "ablation_epe.png"))
    for k in skipped:
        log.warning("no input for figure %r in %s", k, src)
    log.info("wrote %d figures to %s", len(made), out)
    if not made:
        return EXIT_FAILURE
    return EXIT_PARTIAL if skipped and args.figures else EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommands accept the global flags too; SUPPRESS keeps them from
        # overwriting a value given before the subcommand name
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = _Parser(add_help=False)
        g.add_argument("--seed", type=int, default=d(0), help="root seed for every random choice")
        g.add_argument("--config", default=d(None), help="JSON or TOML file with per-subcommand defaults")
        g.add_argument("--workers", type=int, default=d(1), help="parallel workers / torch threads")
        g.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return g

    p = _Parser(prog="dot", description="Dense optical tracking on synthetic scenes.", parents=[global_flags(False)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = global_flags(True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    g = add("generate", cmd_generate, "write synthetic scenes with ground truth")
    g.add_argument("--preset", default="cvo-like-clean")
    g.add_argument("--num-scenes", type=int, default=10)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")

    t = add("train", cmd_train, "train the refiner on generated scenes")
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.add_argument("--steps", type=int, default=4000)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--num-tracks", type=int, default=64)
    t.add_argument("--num-supervision", type=int, default=1024)
    t.add_argument("--supervision", choices=["sparse", "dense"], default="sparse")
    t.add_argument("--track-source", choices=["gt", "gt-corrupt"], default="gt-corrupt")
    t.add_argument("--sampling", choices=["motion", "uniform"], default="motion")
    t.add_argument("--init", choices=["tracks", "zeros"], default="tracks")
    t.add_argument("--num-videos", type=int, default=500)
    t.add_argument("--frames", type=int, default=8)
    t.add_argument("--height", type=int, default=64)
    t.add_argument("--width", type=int, default=64)
    t.add_argument("--patch", type=int, choices=[4, 8], default=4)
    t.add_argument("--iters", type=int, default=4)
    t.add_argument("--model-size", choices=["toy", "full"], default="toy")
    t.add_argument("--checkpoint-every", type=int, default=1000)
    t.add_argument("--log-every", type=int, default=100)

    k = add("track", cmd_track, "dense flow and visibility from a source frame")
    k.add_argument("--video", required=True, help="scene directory or directory of numbered frames")
    k.add_argument("--checkpoint")
    k.add_argument("--out", required=True)
    k.add_argument("--force", action="store_true")
    k.add_argument("--num-tracks", "-N", type=int, default=64)
    k.add_argument("--tracker", choices=["gt", "gt-corrupt", "external"], default="gt-corrupt")
    k.add_argument("--tracks-file", help="tracks JSON produced offline (external tracker)")
    k.add_argument("--sigma", type=float, default=1.0)
    k.add_argument("--flip-prob", type=float, default=0.05)
    k.add_argument("--source", "-s", type=int, default=0)
    k.add_argument("--targets", default="all", help="'all' or comma-separated frame indices")
    k.add_argument("--sampling", choices=["motion", "uniform"], default="motion")
    k.add_argument("--patch", type=int, choices=[4, 8], default=4, help="grid size when running without a model")
    k.add_argument("--tau", type=float, default=TAU)
    k.add_argument("--no-refine", action="store_true")
    k.add_argument("--no-tracks", action="store_true")

    e = add("eval", cmd_eval, "score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")

    a = add("ablate", cmd_ablate, "train and score the ablation variants")
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.add_argument("--variants", help="comma-separated subset of variant names")
    a.add_argument("--steps", type=int, default=4000)
    a.add_argument("--batch-size", type=int, default=4)
    a.add_argument("--num-videos", type=int, default=500)
    a.add_argument("--num-heldout", type=int, default=50)
    a.add_argument("--num-tracks", type=int, default=64)
    a.add_argument("--counts", default="16,64,256", help="track counts for the N curve ('' to skip)")
    a.add_argument("--cache", help="directory for trained models")

    pl = add("plot", cmd_plot, "render figures from track, eval or ablate outputs")
    pl.add_argument("--input", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--force", action="store_true")
    pl.add_argument("--video", help="scene or frames directory for track overlays")
    pl.add_argument("--figures", help=f"comma-separated subset of {','.join(FIGURES)}")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    try:
        conf = _load_config(args.config)
    except UsageError as exc:
        print(f"dot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    section = conf.get(args.command, {})
    if section:
        # config values act as defaults; explicit flags still win
        sp = parser._subparsers._group_actions[0].choices[args.command]
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in section.items()})
        args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DotError, OSError, ValueError, RuntimeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

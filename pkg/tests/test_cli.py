import csv
import json
import shutil

import numpy as np
import pytest
import torch

from dot.cli import main
from dot.core import read_flo, read_frame_png, read_mask_png, read_tracks
from dot.interp import interpolate_bucketed, upsample_nearest
from dot.refiner import Refiner, RefinerConfig, save_checkpoint


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "clean"
    assert main(["--seed", "3", "generate", "--preset", "cvo-like-clean", "--num-scenes", "2",
                 "--height", "32", "--width", "32", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("ckpt") / "model.pt"
    save_checkpoint(Refiner(RefinerConfig.toy(P=4)), path)
    return path


def test_generate_layout_and_determinism(dataset, tmp_path):
    scenes = sorted(p.name for p in dataset.iterdir())
    assert scenes == ["scene_3", "scene_4"]
    root = dataset / "scene_3"
    T = json.loads((root / "spec.json").read_text())["T"]
    assert len(list((root / "frames").glob("*.png"))) == T
    assert len(list((root / "gt").glob("flow_0_*.flo"))) == T - 1
    assert (root / "gt" / "tracks.json").exists()
    again = tmp_path / "again"
    main(["--seed", "3", "generate", "--num-scenes", "2", "--height", "32", "--width", "32", "--out", str(again)])
    for f in sorted(root.rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (again / "scene_3" / f.relative_to(root)).read_bytes(), f


def test_final_differs_from_clean_only_by_blur(dataset, tmp_path):
    final = tmp_path / "final"
    assert main(["--seed", "3", "generate", "--preset", "cvo-like-final", "--num-scenes", "1",
                 "--height", "32", "--width", "32", "--out", str(final)]) == 0
    a, b = dataset / "scene_3", final / "scene_3"
    fa = read_frame_png(a / "frames" / "0000.png")
    fb = read_frame_png(b / "frames" / "0000.png")
    assert not np.array_equal(fa, fb)
    for flo in (a / "gt").glob("*.flo"):
        assert flo.read_bytes() == (b / "gt" / flo.name).read_bytes()
    sa, sb = json.loads((a / "spec.json").read_text()), json.loads((b / "spec.json").read_text())
    assert sb.pop("motion_blur") and not sa.pop("motion_blur")
    assert sa == sb


def test_usage_errors(dataset, tmp_path, checkpoint):
    assert main(["generate", "--preset", "nope", "--out", str(tmp_path / "x")]) == 1
    assert main(["generate", "--out", str(dataset)]) == 1  # not empty, no --force
    scene = str(dataset / "scene_3")
    assert main(["track", "--video", scene, "--out", str(tmp_path / "t"), "--no-refine", "--no-tracks"]) == 1
    assert main(["track", "--video", scene, "--out", str(tmp_path / "t")]) == 1  # no checkpoint
    assert main(["track", "--video", scene, "--checkpoint", str(tmp_path / "missing.pt"),
                 "--out", str(tmp_path / "t")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["track", "--video", scene])
    assert exc.value.code == 1


def test_track_no_refine_is_upsampled_interpolation(dataset, tmp_path):
    scene = dataset / "scene_3"
    out = tmp_path / "nr"
    assert main(["--seed", "1", "track", "--video", str(scene), "--out", str(out), "--no-refine",
                 "--tracker", "gt", "-N", "32"]) == 0
    T = len(list((scene / "frames").glob("*.png")))
    flows = sorted(out.glob("flow_0_*.flo"))
    assert len(flows) == T - 1
    tracks = read_tracks(out / "tracks.json")
    for t in range(1, T):
        est = interpolate_bucketed(tracks, 0, t, 32, 32, 4)
        assert np.array_equal(read_flo(out / f"flow_0_{t}.flo"), upsample_nearest(est.flow0, 4, 32, 32))
        assert np.array_equal(read_mask_png(out / f"vis_0_{t}.png"), upsample_nearest(est.mask0, 4, 32, 32))


def test_track_with_model_and_targets(dataset, tmp_path, checkpoint):
    out = tmp_path / "full"
    assert main(["track", "--video", str(dataset / "scene_4"), "--checkpoint", str(checkpoint), "--out", str(out),
                 "--targets", "2,5"]) == 0
    assert sorted(p.name for p in out.glob("*.flo")) == ["flow_0_2.flo", "flow_0_5.flo"]
    no_tracks = tmp_path / "nt"
    assert main(["track", "--video", str(dataset / "scene_4" / "frames"), "--checkpoint", str(checkpoint),
                 "--out", str(no_tracks), "--no-tracks", "--targets", "1"]) == 0
    assert not (no_tracks / "tracks.json").exists()


def test_track_external(dataset, tmp_path):
    scene = dataset / "scene_3"
    gt_tracks = scene / "gt" / "tracks.json"
    # an external tracker must answer exactly the queries it is given, so run once to learn them
    probe = tmp_path / "probe"
    main(["track", "--video", str(scene), "--out", str(probe), "--no-refine", "--tracker", "gt",
          "--sampling", "uniform", "-N", "16"])
    shutil.copy(probe / "tracks.json", tmp_path / "ext.json")
    out = tmp_path / "ext"
    assert main(["track", "--video", str(scene), "--out", str(out), "--no-refine", "--tracker", "external",
                 "--tracks-file", str(tmp_path / "ext.json"), "--sampling", "uniform", "-N", "16"]) == 0
    assert read_tracks(out / "tracks.json") == read_tracks(probe / "tracks.json")
    assert gt_tracks.exists()


def test_eval_perfect_and_partial(dataset, tmp_path):
    pred = tmp_path / "pred"
    for scene in dataset.iterdir():
        shutil.copytree(scene / "gt", pred / scene.name)
    out = tmp_path / "ev"
    assert main(["eval", "--pred", str(pred), "--gt", str(dataset), "--out", str(out)]) == 0
    agg = json.loads((out / "report.json").read_text())["aggregate"]
    assert agg["epe_all"] == 0.0 and agg["iou_occ"] == 1.0
    (pred / "scene_4" / "flow_0_3.flo").unlink()
    out2 = tmp_path / "ev2"
    assert main(["eval", "--pred", str(pred), "--gt", str(dataset), "--out", str(out2)]) == 2
    assert json.loads((out2 / "report.json").read_text())["aggregate"]["missing"] == ["scene_4/0_3"]

    figs = tmp_path / "figs"
    assert main(["plot", "--input", str(out), "--out", str(figs), "--figures", "report"]) == 0
    png = figs / "report_epe.png"
    assert png.exists() and png.stat().st_size > 0


def test_plot_track_outputs(dataset, tmp_path):
    scene = dataset / "scene_3"
    out = tmp_path / "tr"
    main(["track", "--video", str(scene), "--out", str(out), "--no-refine", "--tracker", "gt", "--targets", "6"])
    figs = tmp_path / "figs"
    assert main(["plot", "--input", str(out), "--video", str(scene), "--out", str(figs),
                 "--figures", "flow,mask,tracks"]) == 0
    assert (figs / "flow_0_6.png").stat().st_size > 0
    assert (figs / "mask_0_6.png").stat().st_size > 0
    assert len(list(figs.glob("tracks_*.png"))) == 7
    assert main(["plot", "--input", str(out), "--out", str(tmp_path / "f2"), "--figures", "n-curve"]) == 3


def test_ablate_and_curve_plots(tmp_path):
    out = tmp_path / "abl"
    cache = tmp_path / "cache"
    args = ["ablate", "--out", str(out), "--cache", str(cache), "--steps", "2", "--batch-size", "1",
            "--num-videos", "3", "--num-heldout", "2", "--num-tracks", "16", "--counts", "8,16"]
    assert main(args) == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    names = [r["name"] for r in rows]
    assert sorted(names) == sorted(["full", "no-motion-sampling", "patch-8", "no-in-domain-training",
                                    "no-track-estimates", "no-refinement"])
    epes = [float(r["epe_all"]) for r in rows]
    assert epes == sorted(epes)
    # cached models: a second run reproduces the table exactly
    assert main(args[:2] + [str(tmp_path / "abl2")] + args[3:]) == 0
    assert (out / "ablation.csv").read_text() == (tmp_path / "abl2" / "ablation.csv").read_text()
    figs = tmp_path / "figs"
    assert main(["plot", "--input", str(out), "--out", str(figs), "--figures", "n-curve,p-curve"]) == 0
    assert (figs / "n_vs_epe.png").stat().st_size > 0 and (figs / "p_vs_epe.png").stat().st_size > 0


def test_config_file_defaults(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"generate": {"num_scenes": 1, "height": 24, "width": 24}}))
    out = tmp_path / "g"
    assert main(["--config", str(cfg), "generate", "--out", str(out)]) == 0
    assert [p.name for p in out.iterdir()] == ["scene_0"]
    assert read_frame_png(out / "scene_0" / "frames" / "0000.png").shape == (24, 24, 3)
    assert main(["--config", str(tmp_path / "nope.json"), "generate", "--out", str(tmp_path / "h")]) == 1


def test_train_command(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--steps", "2", "--batch-size", "1", "--num-videos", "2",
                 "--frames", "3", "--height", "16", "--width", "16"]) == 0
    assert (out / "checkpoint.pt").exists()
    with open(out / "loss_curve.csv") as fh:
        assert next(csv.reader(fh)) == ["step", "flow_l1", "mask_bce", "total"]

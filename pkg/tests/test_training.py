import json
import math

import numpy as np
import pytest
import torch

from dot.refiner import Refiner, RefinerConfig
from dot.training import (
    DenseSupervision,
    SceneBank,
    SparseSupervision,
    TrainConfig,
    TrainingDiverged,
    compute_loss,
    make_batch,
    sample_pair,
    train,
)


def _bce_scalar(p, y):
    p = min(max(p, 1e-3), 1 - 1e-3)
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def _bilinear_scalar(img, x, y):
    H, W = img.shape
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    ax, ay = x - x0, y - y0
    return ((1 - ax) * (1 - ay) * img[y0, x0] + ax * (1 - ay) * img[y0, x1]
            + (1 - ax) * ay * img[y1, x0] + ax * ay * img[y1, x1])


def test_perfect_prediction_floor():
    rng = np.random.default_rng(0)
    gt = torch.from_numpy(rng.normal(size=(1, 2, 8, 8)))
    vis = torch.from_numpy((rng.random((1, 1, 8, 8)) > 0.5).astype(float))
    rep = compute_loss(gt.clone(), vis.clone(), DenseSupervision(gt, vis))
    assert rep.flow_l1.item() == 0
    assert rep.mask_bce.item() == pytest.approx(-math.log(1 - 1e-3))
    assert rep.mask_bce.item() < 0.02


def test_constant_offset_gives_three_and_a_half():
    gt = torch.zeros(2, 2, 5, 7)
    pred = gt + torch.tensor([3.0, 4.0]).view(1, 2, 1, 1)
    ones = torch.ones(2, 1, 5, 7)
    rep = compute_loss(pred, ones, DenseSupervision(gt, ones))
    assert rep.flow_l1.item() == pytest.approx(3.5)


def test_sparse_matches_scalar_loop():
    rng = np.random.default_rng(1)
    B, H, W, S = 2, 6, 9, 7
    flow = rng.normal(size=(B, 2, H, W))
    mask = rng.random((B, 1, H, W))
    pts = np.stack([rng.uniform(0, W - 1, (B, S)), rng.uniform(0, H - 1, (B, S))], -1)
    gflow = rng.normal(size=(B, S, 2))
    gvis = (rng.random((B, S)) > 0.5).astype(float)
    sup = SparseSupervision(torch.from_numpy(pts), torch.from_numpy(gflow), torch.from_numpy(gvis))
    rep = compute_loss(torch.from_numpy(flow), torch.from_numpy(mask), sup)
    l1, bce = 0.0, 0.0
    for b in range(B):
        for k in range(S):
            x, y = pts[b, k]
            for c in range(2):
                l1 += abs(_bilinear_scalar(flow[b, c], x, y) - gflow[b, k, c])
            bce += _bce_scalar(_bilinear_scalar(mask[b, 0], x, y), gvis[b, k])
    assert rep.flow_l1.item() == pytest.approx(l1 / (B * S * 2), abs=1e-6)
    assert rep.mask_bce.item() == pytest.approx(bce / (B * S), abs=1e-6)
    assert rep.total.item() == rep.flow_l1.item() + rep.mask_bce.item()


def test_sparse_at_all_pixels_equals_dense():
    rng = np.random.default_rng(2)
    H, W = 5, 6
    flow = torch.from_numpy(rng.normal(size=(1, 2, H, W)))
    mask = torch.from_numpy(rng.random((1, 1, H, W)))
    gflow = torch.from_numpy(rng.normal(size=(1, 2, H, W)))
    gvis = torch.from_numpy((rng.random((1, 1, H, W)) > 0.3).astype(float))
    ys, xs = np.mgrid[0:H, 0:W]
    pts = torch.from_numpy(np.stack([xs.ravel(), ys.ravel()], -1)[None].astype(float))
    sparse = SparseSupervision(pts, gflow.flatten(2).permute(0, 2, 1), gvis.flatten(1))
    a = compute_loss(flow, mask, sparse)
    b = compute_loss(flow, mask, DenseSupervision(gflow, gvis))
    assert a.flow_l1.item() == pytest.approx(b.flow_l1.item(), abs=1e-12)
    assert a.mask_bce.item() == pytest.approx(b.mask_bce.item(), abs=1e-12)


def test_empty_supervision_rejected():
    sup = SparseSupervision(torch.zeros(1, 0, 2), torch.zeros(1, 0, 2), torch.zeros(1, 0))
    with pytest.raises(ValueError):
        compute_loss(torch.zeros(1, 2, 4, 4), torch.ones(1, 1, 4, 4), sup)


def test_sample_pair_prefers_first_frame():
    rng = np.random.default_rng(0)
    pairs = [sample_pair(rng, 8) for _ in range(4000)]
    assert all(s != t for s, t in pairs)
    frac = np.mean([s == 0 for s, _ in pairs])
    assert abs(frac - (0.5 + 0.5 / 8)) < 0.03


def _tiny_setup(steps=2, **kw):
    cfg = TrainConfig(steps=steps, batch_size=1, n_input=8, n_supervision=32, num_videos=2, T=3, H=16, W=16, **kw)
    rcfg = RefinerConfig.reduced(P=4)
    return cfg, rcfg, SceneBank(2, 0, 3, 16, 16)


def test_zero_learning_rate_keeps_weights():
    cfg, rcfg, bank = _tiny_setup(steps=1, lr=0.0)
    torch.manual_seed(0)
    model = Refiner(rcfg)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(cfg, rcfg, bank, model=model)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_seed_determinism(tmp_path):
    cfg, rcfg, bank = _tiny_setup(steps=3)
    a = train(cfg, rcfg, bank, out_dir=tmp_path / "a").curve
    b = train(cfg, rcfg, SceneBank(2, 0, 3, 16, 16), out_dir=tmp_path / "b").curve
    assert a == b
    assert (tmp_path / "a" / "loss_curve.csv").read_text() == (tmp_path / "b" / "loss_curve.csv").read_text()
    assert (tmp_path / "a" / "checkpoint.pt").exists()


def test_losses_non_negative_and_batches_deterministic():
    cfg, rcfg, bank = _tiny_setup()
    (i1, s1), (i2, s2) = make_batch(bank, cfg, 4, 5), make_batch(bank, cfg, 4, 5)
    for a, b in zip(i1, i2):
        assert torch.equal(a, b)
    assert torch.equal(s1.flow, s2.flow)
    rep = train(cfg, rcfg, bank).curve
    assert all(r["flow_l1"] >= 0 and r["mask_bce"] >= 0 for r in rep)


def test_divergence_aborts():
    cfg, rcfg, bank = _tiny_setup()
    bad = make_batch(bank, cfg, 4, 1)
    bad[1].flow[:] = float("nan")
    with pytest.raises(TrainingDiverged):
        train(cfg, rcfg, batch_fn=lambda step: bad)


def test_config_from_json_and_toml(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"steps": 7, "lr": 0.001}}))
    (tmp_path / "c.toml").write_text("[train]\nsteps = 9\nsupervision = \"dense\"\n")
    assert TrainConfig.from_file(tmp_path / "c.json").steps == 7
    c = TrainConfig.from_file(tmp_path / "c.toml")
    assert c.steps == 9 and c.supervision == "dense"


def test_gradient_matches_finite_differences_small():
    """Quick spot check; the full sweep over every tensor runs in the acceptance suite."""
    torch.manual_seed(0)
    cfg = RefinerConfig.reduced(P=4, K=1)
    model = Refiner(cfg).double()
    rng = np.random.default_rng(3)
    img1 = torch.from_numpy(rng.random((1, 3, 16, 16)))
    img2 = torch.from_numpy(rng.random((1, 3, 16, 16)))
    f0 = torch.from_numpy(rng.normal(size=(1, 2, 4, 4)))
    m0 = torch.ones(1, 1, 4, 4, dtype=torch.double)
    sup = DenseSupervision(torch.from_numpy(rng.normal(size=(1, 2, 16, 16))),
                           torch.from_numpy((rng.random((1, 1, 16, 16)) > 0.5).astype(float)))

    def loss():
        return compute_loss(*model(img1, img2, f0, m0), sup).total

    model.zero_grad()
    loss().backward()
    w = model.flow_head.conv1.weight
    idx = (0, 0, 1, 1)
    eps = 1e-6
    with torch.no_grad():
        w[idx] += eps
        up = loss().item()
        w[idx] -= 2 * eps
        down = loss().item()
        w[idx] += eps
    fd = (up - down) / (2 * eps)
    g = w.grad[idx].item()
    assert abs(fd - g) <= 1e-5 * max(abs(fd), abs(g), 1e-8) + 1e-10

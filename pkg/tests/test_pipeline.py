import numpy as np
import pytest
import torch

from dot.core import ConfigError
from dot.pipeline import naive_per_query_refine, run_dot
from dot.refiner import Refiner, RefinerConfig, refine
from dot.seeding import GroundTruthTracker
from dot.synthgen import generate, random_scene


@pytest.fixture(scope="module")
def scene():
    return generate(random_scene(21, T=4, H=32, W=32))


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return Refiner(RefinerConfig.toy(P=4)).eval()


def test_config_errors(scene):
    video, oracle = scene
    with pytest.raises(ConfigError):
        run_dot(video, GroundTruthTracker(oracle), use_refine=False, use_tracks=False)
    with pytest.raises(ConfigError):
        run_dot(video, GroundTruthTracker(oracle))


def test_all_targets_and_motion_sampling(scene):
    video, oracle = scene
    pf = np.stack([oracle.flow(t, t + 1) for t in range(video.T - 1)])
    out = run_dot(video, GroundTruthTracker(oracle), use_refine=False, N=40, s=1, pair_flows=pf)
    assert sorted(out.pairs) == [0, 2, 3]
    assert out.queries.shape == (40, 2) and out.tracks.N == 40
    assert not out.fallback_sampling
    for t, pr in out.pairs.items():
        assert pr.flow.shape == (32, 32, 2)
        assert set(np.unique(pr.binary_mask())) <= {0.0, 1.0}


def test_refined_output_matches_direct_refine(scene, model):
    video, oracle = scene
    out = run_dot(video, GroundTruthTracker(oracle), model=model, N=32, targets=[3], sampling="uniform")
    pr = out.pairs[3]
    flow, mask = refine(model, video.frames[0], video.frames[3], pr.coarse.flow0, pr.coarse.mask0)
    assert np.array_equal(flow, pr.flow) and np.array_equal(mask, pr.mask)


def test_naive_baseline_agrees_with_single_refine(scene, model):
    video, oracle = scene
    out = run_dot(video, GroundTruthTracker(oracle), model=model, N=32, targets=[2], sampling="uniform")
    pr = out.pairs[2]
    flow, mask = naive_per_query_refine(model, video, 0, 2, pr.coarse)
    assert np.allclose(flow, pr.flow, atol=1e-6) and np.allclose(mask, pr.mask, atol=1e-6)

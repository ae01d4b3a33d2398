import numpy as np
import pytest

from dot.core import NoVisibleTracksError, TrackSet
from dot.interp import interpolate, interpolate_bucketed, upsample_nearest, zero_estimate


def brute_force(tracks, s, t, H, W, P):
    """Scalar double loop: strict < keeps the first (lowest-index) minimiser."""
    pts = tracks.points
    h, w = -(-H // P), -(-W // P)
    flow = np.zeros((h, w, 2))
    mask = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            cx, cy = P * (j + 0.5) - 0.5, P * (i + 0.5) - 0.5
            best, arg = np.inf, -1
            for k in range(len(pts)):
                if pts[k, s, 2] != 1:
                    continue
                d = (pts[k, s, 0] - cx) ** 2 + (pts[k, s, 1] - cy) ** 2
                if d < best:
                    best, arg = d, k
            flow[i, j] = pts[arg, t, :2] - pts[arg, s, :2]
            mask[i, j] = pts[arg, t, 2]
    return flow, mask


def random_tracks(rng, N, T, H, W, ties=False, P=4):
    pts = np.zeros((N, T, 3))
    pts[..., 0] = rng.uniform(0, W - 1, (N, T))
    pts[..., 1] = rng.uniform(0, H - 1, (N, T))
    pts[..., 2] = rng.random((N, T)) > 0.3
    pts[rng.integers(N), :, 2] = 1  # at least one visible track per frame
    if ties and N >= 2:
        # mirror pairs about a cell centre so both are equidistant from it
        for _ in range(N // 3):
            a, b = rng.choice(N, 2, replace=False)
            i, j = rng.integers(H // P), rng.integers(W // P)
            cx, cy = P * (j + 0.5) - 0.5, P * (i + 0.5) - 0.5
            dx, dy = rng.integers(-3, 4, size=2) + 0.5
            pts[a, :, 0], pts[a, :, 1] = cx + dx, cy + dy
            pts[b, :, 0], pts[b, :, 1] = cx - dx, cy - dy
            pts[[a, b], :, 2] = 1
    return TrackSet(pts)


def test_single_track_visible_target():
    pts = np.array([[[10, 10, 1], [14, 12, 1]]], dtype=float)
    est = interpolate_bucketed(TrackSet(pts), 0, 1, 64, 64, 4)
    assert np.all(est.flow0 == [4, 2])
    assert np.all(est.mask0 == 1)


def test_single_track_occluded_target():
    pts = np.array([[[10, 10, 1], [14, 12, 0]]], dtype=float)
    for fn in (interpolate, interpolate_bucketed):
        est = fn(TrackSet(pts), 0, 1, 64, 64, 4)
        assert np.all(est.flow0 == [4, 2])
        assert np.all(est.mask0 == 0)


def test_no_visible_tracks():
    pts = np.array([[[10, 10, 0], [14, 12, 1]]], dtype=float)
    with pytest.raises(NoVisibleTracksError):
        interpolate(TrackSet(pts), 0, 1, 16, 16, 4)
    with pytest.raises(NoVisibleTracksError):
        interpolate_bucketed(TrackSet(pts), 0, 1, 16, 16, 4)


@pytest.mark.parametrize("seed", range(12))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    P = [4, 8][seed % 2]
    N = int(rng.integers(1, 65))
    tracks = random_tracks(rng, N, 3, 64, 64, ties=seed % 3 == 0, P=P)
    s, t = rng.choice(3, 2, replace=False)
    flow, mask = brute_force(tracks, s, t, 64, 64, P)
    for fn in (interpolate, interpolate_bucketed):
        est = fn(tracks, s, t, 64, 64, P)
        assert np.array_equal(est.flow0, flow.astype(np.float32))
        assert np.array_equal(est.mask0, mask.astype(np.float32))


def test_exact_tie_goes_to_lower_index():
    # two tracks symmetric about the centre (1.5, 1.5) of cell (0, 0)
    pts = np.zeros((2, 2, 3))
    pts[0, 0] = [3.5, 1.5, 1]
    pts[0, 1] = [3.5, 1.5, 1]
    pts[1, 0] = [-0.5, 1.5, 1]
    pts[1, 1] = [5.5, 7.5, 0]
    est = interpolate_bucketed(TrackSet(pts), 0, 1, 4, 4, 4)
    assert est.nearest[0, 0] == 0
    swapped = interpolate_bucketed(TrackSet(pts[::-1].copy()), 0, 1, 4, 4, 4)
    assert swapped.nearest[0, 0] == 0  # index 0 is now the other track


def test_clustered_corner():
    rng = np.random.default_rng(5)
    pts = np.zeros((40, 2, 3))
    pts[:, :, :2] = rng.uniform(0, 3, (40, 2, 2))
    pts[:, :, 2] = 1
    tracks = TrackSet(pts)
    flow, mask = brute_force(tracks, 0, 1, 64, 64, 4)
    est = interpolate_bucketed(tracks, 0, 1, 64, 64, 4, cell_size=1.0)
    assert np.array_equal(est.flow0, flow.astype(np.float32))


def test_odd_sizes():
    rng = np.random.default_rng(9)
    tracks = random_tracks(rng, 20, 2, 30, 45)
    flow, _ = brute_force(tracks, 0, 1, 30, 45, 4)
    est = interpolate_bucketed(tracks, 0, 1, 30, 45, 4)
    assert est.flow0.shape == (8, 12, 2)
    assert np.array_equal(est.flow0, flow.astype(np.float32))


def test_permutation_changes_only_ties():
    rng = np.random.default_rng(2)
    tracks = random_tracks(rng, 30, 2, 64, 64)
    perm = rng.permutation(30)
    a = interpolate_bucketed(tracks, 0, 1, 64, 64, 4)
    b = interpolate_bucketed(TrackSet(tracks.points[perm]), 0, 1, 64, 64, 4)
    assert np.array_equal(perm[b.nearest], a.nearest)  # random positions: no ties


def test_translation_leaves_flow_unchanged():
    rng = np.random.default_rng(3)
    pts = random_tracks(rng, 25, 2, 64, 64).points.copy()
    a = interpolate_bucketed(TrackSet(pts), 0, 1, 64, 64, 4)
    # shift by whole cells so the grid maps onto itself
    shifted = pts.copy()
    shifted[..., 0] += 8
    shifted[..., 1] += 4
    b = interpolate_bucketed(TrackSet(shifted), 0, 1, 80, 80, 4)
    assert np.array_equal(b.flow0[1:17, 2:18], a.flow0)


def test_constant_displacement_gives_constant_field():
    rng = np.random.default_rng(4)
    pts = np.zeros((50, 2, 3))
    pts[:, 0, :2] = rng.uniform(0, 63, (50, 2))
    pts[:, 1, :2] = pts[:, 0, :2] + [1.25, -3.0]
    pts[:, 0, 2] = rng.random(50) > 0.5
    pts[0, 0, 2] = 1
    pts[:, 1, 2] = 1
    est = interpolate_bucketed(TrackSet(pts), 0, 1, 64, 64, 4)
    assert np.allclose(est.flow0, [1.25, -3.0])


def test_occluded_source_tracks_ignored():
    pts = np.zeros((2, 2, 3))
    pts[0, 0] = [1, 1, 0]
    pts[0, 1] = [50, 50, 1]
    pts[1, 0] = [60, 60, 1]
    pts[1, 1] = [61, 60, 1]
    est = interpolate(TrackSet(pts), 0, 1, 64, 64, 4)
    assert np.all(est.nearest == 1)


def test_upsample_and_zero_estimate():
    est = zero_estimate(10, 10, 4)
    assert est.flow0.shape == (3, 3, 2) and np.all(est.mask0 == 1)
    c = np.arange(6, dtype=float).reshape(2, 3)
    up = upsample_nearest(c, 4, 7, 10)
    assert up.shape == (7, 10)
    assert up[5, 9] == c[1, 2] and up[3, 4] == c[0, 1]

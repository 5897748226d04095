"""Sequential video alignment: anchors, warm starts, skip paths."""

import numpy as np
import pytest

from pano4d.alignment import AlignConfig
from pano4d.field import GeometricField
from pano4d.motion import ViewSelection, select_views
from pano4d.oracle import DepthPerturbation, perturb_views
from pano4d.spacetime import (
    align_frame,
    align_video,
    anchor_step,
    temporal_losses,
)
from pano4d.geometry import make_direction_grid


def _tiny_cfg(**kw):
    base = dict(iterations=30, shift_delay=15, frame_iterations=20,
                rays_per_step=128, hidden=16, layers=2, octaves=3, seed=4)
    base.update(kw)
    return AlignConfig(**base)


def test_temporal_losses_match_manual(rng):
    field = GeometricField(hidden=16, layers=2, octaves=3, seed=8)
    h, w = 8, 16
    dirs = make_direction_grid(h, w)
    first = rng.random((h, w)).astype(np.float32) + 1.0
    prev = rng.random((h, w)).astype(np.float32) + 1.0
    union = np.zeros((h, w), bool)
    union[2:6, 3:12] = True
    region = np.zeros((h, w), bool)
    region[3:5, 5:9] = True

    ft, pt = temporal_losses(field, first, prev, union, region)
    pred_f = field.evaluate(dirs[~union])
    pred_p = field.evaluate(dirs[union & ~region])
    assert np.isclose(ft, np.mean(np.square(first[~union] - pred_f)), rtol=1e-6)
    assert np.isclose(pt, np.mean(np.square(prev[union & ~region] - pred_p)), rtol=1e-6)


def test_temporal_losses_empty_supports(rng):
    field = GeometricField(hidden=8, layers=2, octaves=2, seed=1)
    h, w = 6, 12
    first = rng.random((h, w)).astype(np.float32)
    prev = rng.random((h, w)).astype(np.float32)
    union = np.ones((h, w), bool)
    ft, pt = temporal_losses(field, first, prev, union, union)
    assert ft == 0.0
    assert pt == 0.0


def test_anchor_step_gradient_matches_fd():
    rng = np.random.default_rng(30)
    field = GeometricField(hidden=8, layers=2, octaves=2, seed=3,
                           dtype=np.float64)
    dirs = rng.normal(size=(30, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    target = rng.random(30) + 0.5
    lam = 0.8

    _, cache = field.forward(field.encode(dirs), want_cache=True)
    clearance = min(float(np.min(np.abs(z))) for z in cache[1])
    assert clearance > 1e-3

    term, grads = anchor_step(field, dirs, target, lam)
    pred = field.forward(field.encode(dirs))
    assert np.isclose(term, np.mean(np.square(target - pred)), rtol=1e-9)

    eps = 1e-6
    for p, g in zip(field.params, grads):
        flat = p.reshape(-1)
        for k in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            orig = flat[k]
            flat[k] = orig + eps
            up = lam * np.mean(np.square(target - field.forward(field.encode(dirs))))
            flat[k] = orig - eps
            dn = lam * np.mean(np.square(target - field.forward(field.encode(dirs))))
            flat[k] = orig
            fd = (up - dn) / (2.0 * eps)
            assert abs(fd - g.reshape(-1)[k]) <= 1e-5 * max(1.0, abs(fd))


def test_align_frame_skip_without_views(small_rig, rng):
    h, w = 16, 32
    prev_field = GeometricField(hidden=16, layers=2, octaves=3, seed=2)
    prev_depth = prev_field.evaluate(make_direction_grid(h, w))
    first_depth = prev_depth.copy()
    region = np.zeros((h, w), bool)
    union = np.zeros((h, w), bool)
    sel = ViewSelection(indices=[], counts=np.zeros(len(small_rig), np.int64))
    res = align_frame(3, {}, sel, region, union, first_depth, prev_depth,
                      prev_field, small_rig, _tiny_cfg())
    assert res.skipped
    assert res.history.shape == (0, 6)
    assert res.affines == {}
    assert np.array_equal(res.depth, prev_depth)
    assert res.depth is not prev_depth
    for a, b in zip(res.field.params, prev_field.params):
        assert np.array_equal(a, b)
        assert a is not b


def test_align_frame_warm_start_is_previous_field(small_rig, rng):
    h, w = 16, 32
    prev_field = GeometricField(hidden=16, layers=2, octaves=3, seed=6)
    grid = make_direction_grid(h, w)
    prev_depth = prev_field.evaluate(grid)
    region = np.zeros((h, w), bool)
    region[7:9, 14:18] = True
    union = region.copy()
    sel = select_views(region, small_rig)
    assert sel.indices
    depths = {i: rng.random((small_rig[i].height, small_rig[i].width))
              .astype(np.float32) + 0.5 for i in sel.indices}
    cfg = _tiny_cfg(learning_rate=0.0, frame_iterations=3)
    res = align_frame(2, depths, sel, region, union, prev_depth, prev_depth,
                      prev_field, small_rig, cfg)
    assert not res.skipped
    assert np.array_equal(res.depth, prev_depth)


def test_align_frame_missing_or_bad_depths(small_rig, rng):
    h, w = 16, 32
    prev_field = GeometricField(hidden=8, layers=2, octaves=2, seed=0)
    prev_depth = prev_field.evaluate(make_direction_grid(h, w))
    region = np.zeros((h, w), bool)
    region[8, 16] = True
    union = region.copy()
    sel = select_views(region, small_rig)
    with pytest.raises(ValueError):
        align_frame(2, {}, sel, region, union, prev_depth, prev_depth,
                    prev_field, small_rig, _tiny_cfg())
    bad = {i: np.zeros((4, 4), np.float32) for i in sel.indices}
    with pytest.raises(ValueError):
        align_frame(2, bad, sel, region, union, prev_depth, prev_depth,
                    prev_field, small_rig, _tiny_cfg())


def test_align_frame_deterministic(small_rig, rng):
    h, w = 16, 32
    prev_field = GeometricField(hidden=16, layers=2, octaves=3, seed=9)
    prev_depth = prev_field.evaluate(make_direction_grid(h, w))
    region = np.zeros((h, w), bool)
    region[6:10, 10:20] = True
    union = region.copy()
    sel = select_views(region, small_rig)
    depths = {i: rng.random((small_rig[i].height, small_rig[i].width))
              .astype(np.float32) + 0.5 for i in sel.indices}
    cfg = _tiny_cfg(frame_iterations=25)
    a = align_frame(2, dict(depths), sel, region, union, prev_depth,
                    prev_depth, prev_field, small_rig, cfg)
    b = align_frame(2, dict(depths), sel, region, union, prev_depth,
                    prev_depth, prev_field, small_rig, cfg)
    assert np.array_equal(a.history, b.history)
    assert np.array_equal(a.depth, b.depth)


def test_align_video_single_frame(oracle_data, small_rig):
    video, depths, _ = oracle_data
    views = perturb_views(depths[0], small_rig, DepthPerturbation(seed=1))
    cfg = _tiny_cfg()
    res = align_video(video[:1], [views.depths], np.zeros((0,) + video.shape[1:3] + (2,), np.float32),
                      small_rig, cfg)
    assert res.depths.shape == (1,) + video.shape[1:3]
    assert res.frames == []
    assert not res.union.any()
    assert len(res.logs) == 1


def test_align_video_flow_count_mismatch(oracle_data, small_rig):
    video, depths, flows = oracle_data
    views = perturb_views(depths[0], small_rig, DepthPerturbation(seed=1))
    provider = lambda l, i: views.depths[i]
    with pytest.raises(ValueError):
        align_video(video, provider, flows[:-1], small_rig, _tiny_cfg())


def test_align_video_tracks_moving_scene(oracle_data, small_rig):
    video, gt_depths, flows = oracle_data
    per_frame = {}

    def provider(frame_index, view_index):
        if frame_index not in per_frame:
            per_frame[frame_index] = perturb_views(
                gt_depths[frame_index - 1], small_rig,
                DepthPerturbation(seed=100 + frame_index))
        return per_frame[frame_index].depths[view_index]

    cfg = AlignConfig(iterations=700, shift_delay=350, frame_iterations=250,
                      rays_per_step=1024, learning_rate=3e-3, hidden=64,
                      layers=3, octaves=5, seed=0)
    res = align_video(video, provider, flows, small_rig, cfg)

    n = len(video)
    assert res.depths.shape == (n,) + video.shape[1:3]
    assert len(res.logs) == n
    assert res.logs[0]["views"] == len(small_rig)
    assert len(res.regions) == n

    # later frames only retrain views that see motion
    for log in res.logs[1:]:
        assert 0 < log["views"] < len(small_rig)

    # every optimized frame's loss decreases between its first and last
    # sampled windows
    for fr in res.frames:
        if fr.skipped:
            continue
        h = fr.history[:, 0]
        assert h[-20:].mean() < h[:20].mean()

    # pixels no motion region ever touches stay anchored to frame one
    static = ~res.union
    assert static.any()
    drift = np.abs(res.depths[1:, static] - res.depths[0][static]) / res.depths[0][static]
    assert np.median(drift) < 0.05

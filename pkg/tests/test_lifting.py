"""Lifting video to a timestamped cloud and rendering it back."""

import numpy as np
import pytest

from pano4d.geometry import icosahedron_rig, make_direction_grid
from pano4d.lifting import (
    Cloud4D,
    active_points,
    attach_source_pixels,
    export_cloud,
    frame_time,
    import_cloud,
    lift,
    render_pano,
    render_points,
    texture_variation_mask,
)


def _random_video(rng, frames=4, h=12, w=24):
    video = rng.random((frames, h, w, 3)).astype(np.float32)
    depths = (rng.random((frames, h, w)).astype(np.float32) + 0.5) * 2.0
    regions = [rng.random((h, w)) > 0.7 for _ in range(frames)]
    return video, depths, regions


def test_frame_time_endpoints():
    assert frame_time(1, 5) == 0.0
    assert frame_time(5, 5) == 1.0
    assert frame_time(3, 5) == 0.5
    assert frame_time(1, 1) == 0.0


def test_texture_variation_static_video():
    video = np.full((6, 8, 16, 3), 0.4, np.float32)
    assert not texture_variation_mask(video, tau=1.0).any()
    # inverted marking selects everything for a static video
    assert texture_variation_mask(video, tau=1.0, mark_high=False).all()


def test_texture_variation_flicker():
    video = np.zeros((4, 6, 6, 3), np.float32)
    video[::2, 2, 3] = 1.0  # gray std at this pixel is 127.5 on 0..255
    mask = texture_variation_mask(video, tau=20.0)
    assert mask[2, 3]
    assert mask.sum() == 1


def test_lift_count_identity(rng):
    video, depths, regions = _random_video(rng)
    std_mask = texture_variation_mask(video, tau=20.0)
    cloud, report = lift(video, depths, regions, tau_std=20.0)
    expected = [video.shape[1] * video.shape[2]]
    for l in range(2, 5):
        expected.append(int((std_mask | regions[l - 1]).sum()))
    assert report.per_frame == expected
    assert len(cloud) == sum(expected)
    assert report.dropped == 0


def test_lift_drops_nonpositive_depths(rng):
    video, depths, regions = _random_video(rng, frames=2)
    depths[0, 3, 4] = 0.0
    depths[0, 5, 6] = -1.0
    cloud, report = lift(video, depths, regions)
    assert report.dropped >= 2
    assert len(cloud) == sum(report.per_frame)
    assert np.all(np.linalg.norm(cloud.positions, axis=1) > 0.0)


def test_lift_static_video_single_timestamp():
    video = np.full((3, 8, 16, 3), 0.6, np.float32)
    depths = np.ones((3, 8, 16), np.float32)
    regions = [np.zeros((8, 16), bool)] * 3
    cloud, report = lift(video, depths, regions)
    assert np.all(cloud.times == 0.0)
    assert report.per_frame == [128, 0, 0]


def test_lift_positions_on_rays(rng):
    video, depths, regions = _random_video(rng, frames=1)
    cloud, _ = lift(video[:1], depths[:1], None)
    h, w = video.shape[1:3]
    dirs = make_direction_grid(h, w).reshape(-1, 3)
    norms = np.linalg.norm(cloud.positions, axis=1)
    assert np.allclose(norms, depths[0].ravel(), rtol=1e-5)
    assert np.allclose(cloud.positions / norms[:, None], dirs, atol=1e-5)


def test_active_points_latest_wins():
    positions = np.array([[0.0, 0.0, 1.0]] * 3 + [[1.0, 0.0, 0.0]], np.float32)
    colors = np.zeros((4, 3), np.float32)
    times = np.array([0.0, 0.5, 1.0, 0.5], np.float32)
    pixels = np.array([7, 7, 7, 9])
    cloud = Cloud4D(positions, colors, times, pixels=pixels, pano_shape=(4, 8))
    assert set(active_points(cloud, 0.0)) == {0}
    assert set(active_points(cloud, 0.5)) == {1, 3}
    assert set(active_points(cloud, 1.0)) == {2, 3}
    assert set(active_points(cloud, 0.4)) == {0}


def test_active_points_requires_pixels():
    cloud = Cloud4D(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        active_points(cloud, 0.0)


def test_active_points_matches_dense_oracle(rng):
    n, npix = 500, 40
    pixels = rng.integers(npix, size=n)
    times = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=n)
    cloud = Cloud4D(np.zeros((n, 3)), np.zeros((n, 3)), times.astype(np.float32),
                    pixels=pixels, pano_shape=(5, 8))
    for tq in (0.0, 0.3, 0.75, 1.0):
        act = active_points(cloud, tq)
        # at most one survivor per pixel, each the max eligible time
        assert len(np.unique(pixels[act])) == len(act)
        eligible = times <= tq
        for i in act:
            same = eligible & (pixels == pixels[i])
            assert times[i] == times[same].max()
        # every pixel with an eligible point is represented
        assert set(pixels[act]) == set(pixels[eligible])


def test_lift_frame_one_self_reprojects(rng):
    video, depths, _ = _random_video(rng, frames=1)
    cloud, _ = lift(video[:1], depths[:1], None)
    frame, valid = render_pano(cloud, video.shape[1], video.shape[2], 0.0)
    assert valid.all()
    assert np.max(np.abs(frame - video[0])) == 0.0


def test_render_pano_zbuffer_nearer_wins():
    # two points on the same ray; the nearer one must win
    d = make_direction_grid(8, 16)[3, 5]
    positions = np.stack([d * 4.0, d * 1.5]).astype(np.float32)
    colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], np.float32)
    times = np.zeros(2, np.float32)
    cloud = attach_source_pixels(
        Cloud4D(positions, colors, times), 8, 16)
    frame, valid = render_pano(cloud, 8, 16, 0.0)
    assert valid[3, 5]
    assert np.array_equal(frame[3, 5], (0.0, 1.0, 0.0))
    assert valid.sum() == 1


def test_render_points_projects_into_camera():
    cam = icosahedron_rig(fov=90.0, width=16, height=16)[0]
    # a point straight down the optical axis lands at the image center
    from pano4d.geometry import camera_rotation
    axis = camera_rotation(cam) @ np.array([0.0, 0.0, 1.0])
    cloud = Cloud4D(np.array([axis * 2.0], np.float32),
                    np.array([[0.2, 0.4, 0.6]], np.float32),
                    np.zeros(1, np.float32), pixels=np.array([0]),
                    pano_shape=(8, 16))
    img, valid = render_points(cloud, cam, 0.0)
    assert valid.sum() == 1
    r, c = np.argwhere(valid)[0]
    assert (r, c) in {(7, 7), (7, 8), (8, 7), (8, 8)}
    assert np.allclose(img[r, c], (0.2, 0.4, 0.6))


def test_render_points_ignores_behind_camera():
    cam = icosahedron_rig(fov=90.0, width=8, height=8)[0]
    from pano4d.geometry import camera_rotation
    axis = camera_rotation(cam) @ np.array([0.0, 0.0, 1.0])
    cloud = Cloud4D(np.array([axis * -3.0], np.float32),
                    np.ones((1, 3), np.float32), np.zeros(1, np.float32),
                    pixels=np.array([0]), pano_shape=(8, 16))
    _, valid = render_points(cloud, cam, 0.0)
    assert not valid.any()


def test_cloud_ply_round_trip(tmp_path, rng):
    video, depths, regions = _random_video(rng, frames=3)
    cloud, _ = lift(video, depths, regions)
    path = tmp_path / "cloud.ply"
    export_cloud(path, cloud)
    back = import_cloud(path, pano_shape=(video.shape[1], video.shape[2]))
    assert np.array_equal(back.positions, cloud.positions)
    assert np.array_equal(back.times, cloud.times)
    assert np.max(np.abs(back.colors - cloud.colors)) <= 0.5 / 255.0 + 1e-7
    # recomputed source pixels agree with the originals
    assert np.array_equal(back.pixels, cloud.pixels)


def test_import_without_shape_has_no_pixels(tmp_path, rng):
    video, depths, _ = _random_video(rng, frames=1)
    cloud, _ = lift(video[:1], depths[:1], None)
    path = tmp_path / "cloud.ply"
    export_cloud(path, cloud)
    back = import_cloud(path)
    assert back.pixels is None
    assert back.pano_shape is None

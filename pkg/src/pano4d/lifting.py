"""Lifting aligned panoramic video into a timestamped point cloud.

The first frame contributes every pixel as static geometry at t = 0.
Each later frame contributes only pixels that plausibly changed: the
texture-variation mask (temporal grayscale std) or the frame's motion
region. Points carry normalized timestamps and remember their source
pixel so rendering can keep only the latest contribution per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import io as pio
from .geometry import (
    PerspectiveCamera,
    camera_rotation,
    directions_to_pixels,
    make_direction_grid,
)

DEFAULT_TAU_STD = 20.0


@dataclass
class Cloud4D:
    """Point cloud with per-point time and source-pixel bookkeeping.

    pixels and pano_shape are populated when the cloud was built (or
    re-associated) against a known panorama grid; they are not stored in
    PLY files.
    """

    positions: np.ndarray
    colors: np.ndarray
    times: np.ndarray
    pixels: np.ndarray | None = None
    pano_shape: tuple[int, int] | None = None

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class LiftReport:
    per_frame: list[int]
    dropped: int
    std_mask_pixels: int


def texture_variation_mask(video: np.ndarray, tau: float = DEFAULT_TAU_STD,
                           mark_high: bool = True) -> np.ndarray:
    """Pixels whose grayscale value varies over time.

    The statistic is the population standard deviation of the BT.601 gray
    value (0..255 scale) across frames. By default pixels with std >= tau
    are marked as changing; mark_high=False inverts the comparison for
    pipelines that want the complementary set.
    """
    gray = pio.rgb_to_gray601(np.asarray(video))
    std = gray.std(axis=0)
    return std >= tau if mark_high else std < tau


def frame_time(frame_index: int, n_frames: int) -> float:
    """Normalized timestamp of a 1-based frame index; 0 when L == 1."""
    if n_frames <= 1:
        return 0.0
    return (frame_index - 1) / (n_frames - 1)


def lift(video: np.ndarray, depths: np.ndarray, regions,
         tau_std: float = DEFAULT_TAU_STD, mark_high: bool = True):
    """Build the 4D cloud from video, aligned depths and motion regions.

    Args:
        video: (L, H, W, 3) frames in [0, 1].
        depths: (L, H, W) aligned panoramic depths.
        regions: per-frame motion masks; regions[l-1] is used for frame
            l >= 2, the first entry is ignored. May be None when L == 1.
        tau_std, mark_high: texture-variation mask parameters.

    Returns:
        (Cloud4D, LiftReport). Points with non-positive depth are dropped
        and counted in the report.
    """
    n_frames, height, width = video.shape[:3]
    if depths.shape != (n_frames, height, width):
        raise ValueError(f"depths shape {depths.shape} does not match video")
    dirs = make_direction_grid(height, width).reshape(-1, 3)
    std_mask = texture_variation_mask(video, tau_std, mark_high) if n_frames > 1 \
        else np.zeros((height, width), bool)

    pos_parts, col_parts, t_parts, pix_parts = [], [], [], []
    per_frame = []
    dropped = 0
    for l in range(1, n_frames + 1):
        if l == 1:
            pix = np.arange(height * width)
        else:
            sel = std_mask | np.asarray(regions[l - 1], bool)
            pix = np.flatnonzero(sel.ravel())
        d = depths[l - 1].ravel()[pix]
        keep = d > 0.0
        dropped += int((~keep).sum())
        pix = pix[keep]
        d = d[keep]
        pos_parts.append((dirs[pix] * d[:, None]).astype(np.float32))
        col_parts.append(video[l - 1].reshape(-1, 3)[pix].astype(np.float32))
        t_parts.append(np.full(len(pix), frame_time(l, n_frames), np.float32))
        pix_parts.append(pix)
        per_frame.append(len(pix))

    cloud = Cloud4D(
        positions=np.concatenate(pos_parts),
        colors=np.concatenate(col_parts),
        times=np.concatenate(t_parts),
        pixels=np.concatenate(pix_parts),
        pano_shape=(height, width),
    )
    return cloud, LiftReport(per_frame=per_frame, dropped=dropped,
                             std_mask_pixels=int(std_mask.sum()))


def export_cloud(path, cloud: Cloud4D) -> None:
    pio.write_ply(path, cloud.positions, cloud.colors, cloud.times)


def import_cloud(path, pano_shape: tuple[int, int] | None = None) -> Cloud4D:
    """Read a PLY cloud; source pixels are recomputed when a shape is given."""
    positions, colors, times = pio.read_ply(path)
    cloud = Cloud4D(positions=positions, colors=colors, times=times)
    if pano_shape is not None:
        cloud = attach_source_pixels(cloud, *pano_shape)
    return cloud


def attach_source_pixels(cloud: Cloud4D, height: int, width: int) -> Cloud4D:
    """Associate each point with the panorama pixel its direction hits."""
    norms = np.linalg.norm(cloud.positions, axis=1, keepdims=True)
    dirs = cloud.positions / np.maximum(norms, 1e-12)
    rows, cols = directions_to_pixels(dirs, height, width)
    r = np.clip(np.floor(rows + 0.5).astype(np.int64), 0, height - 1)
    c = np.floor(cols + 0.5).astype(np.int64) % width
    return replace(cloud, pixels=r * width + c, pano_shape=(height, width))


def active_points(cloud: Cloud4D, t_query: float) -> np.ndarray:
    """Indices of points visible at t_query.

    For each source pixel the temporally latest contribution with
    t <= t_query wins; static points (t = 0) stay active until a later
    contribution supersedes them.
    """
    if cloud.pixels is None:
        raise ValueError("cloud has no source pixels; call attach_source_pixels")
    idx = np.flatnonzero(cloud.times <= t_query)
    if idx.size == 0:
        return idx
    order = np.lexsort((cloud.times[idx], cloud.pixels[idx]))
    idx = idx[order]
    pix = cloud.pixels[idx]
    last = np.r_[pix[1:] != pix[:-1], True]
    return idx[last]


def _splat(rows, cols, dist, values, height, width):
    """Nearest-pixel z-buffer splat; nearer points overwrite farther ones."""
    img = np.zeros((height * width, values.shape[1]), np.float32)
    zbuf = np.zeros(height * width, np.float32)
    valid = np.zeros(height * width, bool)
    order = np.argsort(-dist, kind="stable")
    flat = rows[order] * width + cols[order]
    img[flat] = values[order]
    zbuf[flat] = dist[order]
    valid[flat] = True
    return img.reshape(height, width, -1), zbuf.reshape(height, width), \
        valid.reshape(height, width)


def render_points(cloud: Cloud4D, cam: PerspectiveCamera, t_query: float):
    """Z-buffered one-pixel splat of the active points into a camera.

    Returns (image, valid); pixels no point reached are invalid.
    """
    act = active_points(cloud, t_query)
    rel = cloud.positions[act].astype(np.float64) - np.asarray(cam.position)
    rot = camera_rotation(cam)
    d_cam = rel @ rot
    z = d_cam[:, 2]
    front = z > 1e-12
    f = cam.focal
    with np.errstate(divide="ignore", invalid="ignore"):
        cols = np.floor(f * d_cam[:, 0] / z + cam.width / 2.0 - 0.5 + 0.5)
        rows = np.floor(cam.height / 2.0 - f * d_cam[:, 1] / z - 0.5 + 0.5)
    ok = front & (rows >= 0) & (rows < cam.height) & (cols >= 0) & (cols < cam.width)
    dist = np.linalg.norm(rel[ok], axis=1)
    img, _, valid = _splat(rows[ok].astype(np.int64), cols[ok].astype(np.int64),
                           dist, cloud.colors[act][ok], cam.height, cam.width)
    return img, valid


def render_pano(cloud: Cloud4D, height: int, width: int, t_query: float):
    """Splat the active points back onto an equirect grid.

    Returns (frame, valid). A full lift of frame 1 reproduces the source
    frame exactly up to color quantization because every point lands back
    on its own pixel.
    """
    act = active_points(cloud, t_query)
    pos = cloud.positions[act].astype(np.float64)
    dist = np.linalg.norm(pos, axis=1)
    keep = dist > 1e-12
    pos = pos[keep]
    dirs = pos / dist[keep, None]
    rows, cols = directions_to_pixels(dirs, height, width)
    r = np.clip(np.floor(rows + 0.5).astype(np.int64), 0, height - 1)
    c = np.floor(cols + 0.5).astype(np.int64) % width
    img, _, valid = _splat(r, c, dist[keep], cloud.colors[act][keep], height, width)
    return img, valid

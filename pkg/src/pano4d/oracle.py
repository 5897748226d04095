"""Synthetic panoramic scenes with exact depth, flow and masks.

The background is a star-shaped radial surface around the origin textured
with seamless value noise. An optional moving disk (a spherical cap at a
nearer radius) rides a great circle and carries a pattern fixed to its own
frame, so ground-truth optical flow is exact screen-space displacement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import directions_to_pixels, make_direction_grid
from .warping import project_pano_depth

CLAMP_EPS = 1e-4


def _hash01(key: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer mapping uint64 keys to floats in [0, 1)."""
    x = key.astype(np.uint64)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _lattice(seed: int, octave: int, gy: np.ndarray, gx: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps by design; the seed mix stays in python ints.
    base = ((seed & 0xFFFFFFFF) * 0x9E3779B97F4A7C15
            + octave * 0xD1B54A32D192ED03) % (1 << 64)
    key = gy.astype(np.uint64) * np.uint64(0x8CB92BA72F3D8DD7)
    key = key + gx.astype(np.uint64) * np.uint64(0x2545F4914F6CDD1D)
    key = key + np.uint64(base)
    return _hash01(key)


def value_noise(height: int, width: int, seed: int, octaves: int = 3,
                base_cells: int = 6) -> np.ndarray:
    """Multi-octave value noise in [0, 1], periodic across the width."""
    out = np.zeros((height, width), np.float64)
    total = 0.0
    for o in range(octaves):
        ny = base_cells * (1 << o)
        nx = 2 * ny
        v = (np.arange(height) + 0.5) / height * ny
        u = (np.arange(width) + 0.5) / width * nx
        gy = np.floor(v).astype(np.int64)
        gx = np.floor(u).astype(np.int64)
        fy = v - gy
        fx = u - gx
        fy = fy * fy * (3.0 - 2.0 * fy)
        fx = fx * fx * (3.0 - 2.0 * fx)
        gy0 = gy[:, None]
        gy1 = np.minimum(gy + 1, ny)[:, None]
        gx0 = (gx % nx)[None, :]
        gx1 = ((gx + 1) % nx)[None, :]
        v00 = _lattice(seed, o, gy0, gx0)
        v01 = _lattice(seed, o, gy0, gx1)
        v10 = _lattice(seed, o, gy1, gx0)
        v11 = _lattice(seed, o, gy1, gx1)
        top = v00 + (v01 - v00) * fx[None, :]
        bot = v10 + (v11 - v10) * fx[None, :]
        amp = 0.5**o
        out += amp * (top + (bot - top) * fy[:, None])
        total += amp
    return out / total


def _axis_rotation(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    a = axis / np.linalg.norm(axis)
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    x, y, z = a
    cross = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return c * np.eye(3) + s * cross + (1.0 - c) * np.outer(a, a)


@dataclass
class OracleScene:
    """Parameters of a synthetic scene; W is always 2 * height."""

    height: int = 128
    frames: int = 9
    seed: int = 0
    radius: float = 3.0
    radial_amps: tuple[float, ...] = (0.3, 0.2, 0.1)
    with_object: bool = True
    obj_radius_deg: float = 10.0
    obj_speed_deg: float = 4.0
    obj_depth: float = 1.5
    obj_depth_amp: float = 0.3
    path_axis: tuple[float, float, float] = (0.25, 1.0, 0.0)

    @property
    def width(self) -> int:
        return 2 * self.height

    def background_radius(self, lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
        r = np.full(np.broadcast_shapes(lon.shape, lat.shape), self.radius)
        for m, amp in enumerate(self.radial_amps, start=1):
            r = r + amp * np.sin(m * lon) * np.cos(m * lat)
        return r

    def object_rotation(self, frame_index: int) -> np.ndarray:
        """World rotation carrying the object from its start to frame l."""
        angle = np.radians(self.obj_speed_deg) * (frame_index - 1)
        return _axis_rotation(np.asarray(self.path_axis, np.float64), angle)

    def object_center(self, frame_index: int) -> np.ndarray:
        axis = np.asarray(self.path_axis, np.float64)
        axis = axis / np.linalg.norm(axis)
        fwd = np.array([0.0, 0.0, 1.0])
        c0 = fwd - np.dot(fwd, axis) * axis
        c0 /= np.linalg.norm(c0)
        return self.object_rotation(frame_index) @ c0

    def object_depth_at(self, frame_index: int) -> float:
        phase = 2.0 * np.pi * (frame_index - 1) / self.frames
        return self.obj_depth + self.obj_depth_amp * np.sin(phase)


def _object_mask(scene: OracleScene, dirs: np.ndarray, frame_index: int) -> np.ndarray:
    center = scene.object_center(frame_index)
    return dirs @ center >= np.cos(np.radians(scene.obj_radius_deg))


def _object_color(scene: OracleScene, dirs: np.ndarray, frame_index: int) -> np.ndarray:
    """Pattern fixed to the object frame, so it moves rigidly with the cap."""
    rot = scene.object_rotation(frame_index)
    axis = np.asarray(scene.path_axis, np.float64)
    axis = axis / np.linalg.norm(axis)
    c0 = scene.object_center(1)
    e1 = rot @ np.cross(axis, c0)
    a = dirs @ e1
    b = dirs @ axis
    r = np.empty(dirs.shape[:-1] + (3,), np.float64)
    r[..., 0] = 0.75 + 0.2 * np.sin(40.0 * a)
    r[..., 1] = 0.35 + 0.2 * np.sin(40.0 * b + 1.0)
    r[..., 2] = 0.25 + 0.15 * np.cos(30.0 * (a + b))
    return np.clip(r, 0.0, 1.0)


def render_scene(scene: OracleScene, frame_index: int):
    """Render one frame of the scene.

    Args:
        scene: scene parameters.
        frame_index: 1-based frame number in [1, scene.frames].

    Returns:
        (frame, depth, flow): float32 RGB in [0, 1], float32 radial depth,
        and float32 (H, W, 2) flow to the next frame with wrap-aware u.
        flow is None for the last frame.
    """
    if not 1 <= frame_index <= scene.frames:
        raise ValueError(f"frame_index {frame_index} outside [1, {scene.frames}]")
    h, w = scene.height, scene.width
    dirs = make_direction_grid(h, w)
    lon = 2.0 * np.pi * (np.arange(w) + 0.5) / w - np.pi
    lat = np.pi / 2.0 - np.pi * (np.arange(h) + 0.5) / h
    lon2, lat2 = lon[None, :], lat[:, None]

    frame = np.stack(
        [0.15 + 0.7 * value_noise(h, w, scene.seed + 101 * ch) for ch in range(3)],
        axis=-1,
    )
    depth = scene.background_radius(lon2, lat2)
    flow = np.zeros((h, w, 2), np.float64)

    if scene.with_object:
        mask = _object_mask(scene, dirs, frame_index)
        depth[mask] = scene.object_depth_at(frame_index)
        frame[mask] = _object_color(scene, dirs, frame_index)[mask]
        if frame_index < scene.frames:
            step = _axis_rotation(
                np.asarray(scene.path_axis, np.float64),
                np.radians(scene.obj_speed_deg),
            )
            moved = dirs[mask] @ step.T
            rows, cols = directions_to_pixels(moved, h, w)
            jj, kk = np.nonzero(mask)
            du = cols - kk
            du = (du + w / 2.0) % w - w / 2.0
            flow[jj, kk, 0] = du
            flow[jj, kk, 1] = rows - jj

    out_flow = None if frame_index == scene.frames else flow.astype(np.float32)
    return frame.astype(np.float32), depth.astype(np.float32), out_flow


def render_video(scene: OracleScene):
    """All frames of the scene.

    Returns (video (L, H, W, 3), depths (L, H, W), flows (L-1, H, W, 2)).
    """
    frames, depths, flows = [], [], []
    for l in range(1, scene.frames + 1):
        f, d, fl = render_scene(scene, l)
        frames.append(f)
        depths.append(d)
        if fl is not None:
            flows.append(fl)
    return np.stack(frames), np.stack(depths), np.stack(flows) if flows else \
        np.zeros((0, scene.height, scene.width, 2), np.float32)


@dataclass
class DepthPerturbation:
    """Affine corruption applied to ground-truth view depths."""

    scale_range: tuple[float, float] = (0.5, 2.0)
    shift_range: tuple[float, float] = (-0.5, 0.5)
    noise_sigma: float = 0.0
    seed: int = 0


@dataclass
class PerturbedViews:
    depths: list[np.ndarray]
    scales: np.ndarray
    shifts: np.ndarray
    clamped: np.ndarray  # per-view count of values clamped to CLAMP_EPS

    @property
    def total_clamped(self) -> int:
        return int(self.clamped.sum())


def perturb_views(pano_depth: np.ndarray, rig, pert: DepthPerturbation) -> PerturbedViews:
    """Project ground-truth depth into each camera and corrupt it.

    Each view gets its own scale and constant shift plus optional Gaussian
    noise. Values that end up non-positive are clamped to CLAMP_EPS and
    counted, keeping the outputs valid depth maps.
    """
    rng = np.random.default_rng(pert.seed)
    scales = rng.uniform(*pert.scale_range, size=len(rig))
    shifts = rng.uniform(*pert.shift_range, size=len(rig))
    depths = []
    clamped = np.zeros(len(rig), np.int64)
    for i, cam in enumerate(rig):
        d = project_pano_depth(pano_depth, cam).astype(np.float64)
        d = scales[i] * d + shifts[i]
        if pert.noise_sigma > 0:
            d += rng.normal(0.0, pert.noise_sigma, d.shape)
        low = d < CLAMP_EPS
        clamped[i] = int(low.sum())
        d[low] = CLAMP_EPS
        depths.append(d.astype(np.float32))
    return PerturbedViews(depths=depths, scales=scales, shifts=shifts, clamped=clamped)

"""Training camera rigs and depth-based view warping.

The training rig combines a 38-camera set with a narrow field of view
(2 polar cameras plus three 12-camera latitude rings) and the 20-camera
icosahedron set with a wide field of view. Warping shifts a view sideways
using its depth map to synthesize nearby viewpoints; disoccluded pixels
are reported invalid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    PerspectiveCamera,
    camera_from_axis,
    camera_ray_grid,
    camera_rotation,
    directions_to_pixels,
    frustum_mask,
    icosahedron_rig,
    make_direction_grid,
    sample_bilinear,
)

RING_FOV_DEG = 46.0
ICO_FOV_DEG = 75.0
SUPPLEMENTARY_OFFSET = 0.1


@dataclass(frozen=True)
class TrainingRig:
    """58 cameras: ring_count narrow-fov cameras then the icosahedron set."""

    cameras: tuple[PerspectiveCamera, ...]
    ring_fov: float
    ico_fov: float
    ring_count: int = 38

    @property
    def ring_cameras(self) -> tuple[PerspectiveCamera, ...]:
        return self.cameras[: self.ring_count]

    @property
    def ico_cameras(self) -> tuple[PerspectiveCamera, ...]:
        return self.cameras[self.ring_count:]


def build_training_rig(width: int = 128, height: int = 128,
                       ring_fov: float = RING_FOV_DEG,
                       ico_fov: float = ICO_FOV_DEG) -> TrainingRig:
    """The 58-camera supervision rig, all cameras at the panorama center.

    The narrow set is two polar cameras plus rings of 12 cameras at
    latitudes +45, 0 and -45 deg. At the default 46 deg fov the union of
    the 38 narrow frusta covers every pixel direction of a 256x512 grid;
    45 deg is the theoretical minimum with zero margin, so one degree of
    slack is built in. The wide set reuses the icosahedron layout.
    """
    cams = [
        camera_from_axis(np.array([0.0, 1.0, 0.0]), ring_fov, width, height, "pole_up"),
        camera_from_axis(np.array([0.0, -1.0, 0.0]), ring_fov, width, height, "pole_dn"),
    ]
    for pitch, tag in ((45.0, "r45"), (0.0, "r00"), (-45.0, "rm45")):
        for yaw in range(0, 360, 30):
            cams.append(PerspectiveCamera(
                f"{tag}_{yaw:03d}", float(yaw), pitch, 0.0, ring_fov, width, height))
    ring_count = len(cams)
    cams += icosahedron_rig(ico_fov, width, height)
    return TrainingRig(cameras=tuple(cams), ring_fov=ring_fov,
                       ico_fov=ico_fov, ring_count=ring_count)


def rig_coverage(cameras, height: int = 256) -> float:
    """Fraction of panorama pixel directions inside at least one frustum."""
    dirs = make_direction_grid(height, 2 * height)
    covered = np.zeros(dirs.shape[:2], bool)
    for cam in cameras:
        covered |= frustum_mask(dirs, cam)
    return float(covered.mean())


def project_pano_depth(pano_depth: np.ndarray, cam: PerspectiveCamera) -> np.ndarray:
    """Sample panoramic depth along the camera's rays.

    The panorama stores radial distance from its center, so the bilinear
    sample along each ray is already the Euclidean distance from the origin
    rather than a z-depth.
    """
    rays = camera_ray_grid(cam)
    rows, cols = directions_to_pixels(rays, pano_depth.shape[0], pano_depth.shape[1])
    return sample_bilinear(pano_depth, rows, cols, wrap_x=True).astype(np.float32)


@dataclass
class WarpedView:
    image: np.ndarray
    depth: np.ndarray
    valid: np.ndarray


def warp_view(image: np.ndarray, depth: np.ndarray, cam: PerspectiveCamera,
              offset) -> WarpedView:
    """Re-render a view from a camera translated by offset.

    Args:
        image: (h, w, C) or (h, w) source view.
        depth: (h, w) per-pixel Euclidean distance from the camera center.
        cam: source camera; orientation is kept, only the center moves.
        offset: (3,) translation in the camera frame (x right, y up, z
            forward).

    Returns:
        WarpedView whose depth is the distance from the moved center and
        whose valid mask is False where nothing splatted (disocclusions).
    """
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth shape {depth.shape} does not match camera "
                         f"{cam.height}x{cam.width}")
    rot = camera_rotation(cam)
    rays = camera_ray_grid(cam)
    points = np.asarray(cam.position) + rays * depth[..., None]
    center = np.asarray(cam.position) + rot @ np.asarray(offset, np.float64)
    rel = (points - center).reshape(-1, 3)
    d_cam = rel @ rot
    z = d_cam[:, 2]
    dist = np.linalg.norm(rel, axis=1)
    f = cam.focal
    front = z > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        cols = np.floor(f * d_cam[:, 0] / z + cam.width / 2.0 - 0.5 + 0.5)
        rows = np.floor(cam.height / 2.0 - f * d_cam[:, 1] / z - 0.5 + 0.5)
    ok = front & (rows >= 0) & (rows < cam.height) & (cols >= 0) & (cols < cam.width)
    ok &= np.isfinite(rows) & np.isfinite(cols)
    flat = (rows[ok].astype(np.int64) * cam.width + cols[ok].astype(np.int64))
    src_vals = image.reshape(-1, image.shape[-1]) if image.ndim == 3 else image.reshape(-1, 1)
    src_vals = src_vals[ok]
    src_dist = dist[ok]
    # Splat far to near so the nearest surface wins each pixel.
    order = np.argsort(-src_dist, kind="stable")
    out_img = np.zeros((cam.height * cam.width, src_vals.shape[1]), src_vals.dtype)
    out_depth = np.zeros(cam.height * cam.width, np.float32)
    valid = np.zeros(cam.height * cam.width, bool)
    idx = flat[order]
    out_img[idx] = src_vals[order]
    out_depth[idx] = src_dist[order].astype(np.float32)
    valid[idx] = True
    shape = (cam.height, cam.width) if image.ndim == 2 else (cam.height, cam.width, image.shape[-1])
    return WarpedView(
        image=out_img.reshape(shape),
        depth=out_depth.reshape(cam.height, cam.width),
        valid=valid.reshape(cam.height, cam.width),
    )


def supplementary_offsets(magnitude: float = SUPPLEMENTARY_OFFSET) -> dict[str, np.ndarray]:
    """Camera-frame offsets for the four supplementary views."""
    return {
        "u": np.array([0.0, magnitude, 0.0]),
        "d": np.array([0.0, -magnitude, 0.0]),
        "l": np.array([-magnitude, 0.0, 0.0]),
        "r": np.array([magnitude, 0.0, 0.0]),
    }


def generate_supplementary_views(image: np.ndarray, depth: np.ndarray,
                                 cam: PerspectiveCamera,
                                 magnitude: float = SUPPLEMENTARY_OFFSET
                                 ) -> dict[str, WarpedView]:
    """Warp a view up, down, left and right by the given offset magnitude."""
    return {tag: warp_view(image, depth, cam, off)
            for tag, off in supplementary_offsets(magnitude).items()}


def translated_camera(cam: PerspectiveCamera, offset) -> PerspectiveCamera:
    """The camera a warp_view result belongs to (same orientation, moved center)."""
    rot = camera_rotation(cam)
    center = np.asarray(cam.position) + rot @ np.asarray(offset, np.float64)
    return replace(cam, position=tuple(float(v) for v in center))

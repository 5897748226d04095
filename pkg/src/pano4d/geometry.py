"""Equirectangular and perspective camera geometry.

Conventions used across the package:

* World frame: +Y is up, +Z is forward (longitude 0), +X is longitude +90 deg.
* Equirectangular images are H x W with W = 2H. Row 0 is the top of the
  sphere. The center of pixel (j, k) maps to longitude
  lon = 2*pi*(k+0.5)/W - pi and latitude lat = pi/2 - pi*(j+0.5)/H, giving
  the unit direction (cos(lat)*sin(lon), sin(lat), cos(lat)*cos(lon)).
* Camera frame: x right, y up, z forward (optical axis). An unrotated camera
  looks along +Z. Orientation is yaw, then pitch, then roll, applied about
  the world Y axis, the camera X axis, and the camera Z axis respectively.
  Positive yaw turns toward +X, positive pitch looks up.
* Horizontal sampling wraps around the longitude seam, vertical sampling
  clamps at the poles.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# Largest angular distance from any direction to the nearest icosahedron face
# axis is ~37.377 deg, so a square frustum narrower than twice that cannot
# cover the sphere regardless of in-plane orientation.
ICOSAHEDRON_COVERAGE_FOV_DEG = 74.75473628129939

POLE_EPS_DEG = 0.5


@dataclass(frozen=True)
class PerspectiveCamera:
    """Pinhole camera with square pixels and a horizontal field of view.

    Angles are in degrees, position in scene units with (0, 0, 0) at the
    panorama center.
    """

    name: str
    yaw: float
    pitch: float
    roll: float
    fov: float
    width: int
    height: int
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if not 0.0 < self.fov < 180.0:
            raise ValueError(f"fov must be in (0, 180) deg, got {self.fov}")
        if self.width < 2 or self.height < 2:
            raise ValueError(
                f"camera needs width and height >= 2, got {self.width}x{self.height}"
            )

    @property
    def focal(self) -> float:
        """Focal length in pixels."""
        return 0.5 * self.width / np.tan(np.radians(self.fov) / 2.0)


def check_panorama_shape(arr: np.ndarray, what: str = "panorama") -> None:
    """Raise ValueError unless arr is H x W (x C) with W == 2H."""
    if arr.ndim not in (2, 3):
        raise ValueError(f"{what} must be 2D or 3D, got shape {arr.shape}")
    h, w = arr.shape[:2]
    if w != 2 * h:
        raise ValueError(f"{what} must have width == 2*height, got {h}x{w}")


def make_direction_grid(height: int, width: int) -> np.ndarray:
    """Unit view directions for every pixel center of an equirect image.

    Returns an (height, width, 3) float64 array.
    """
    if width != 2 * height:
        raise ValueError(f"direction grid needs width == 2*height, got {height}x{width}")
    lon = 2.0 * np.pi * (np.arange(width) + 0.5) / width - np.pi
    lat = np.pi / 2.0 - np.pi * (np.arange(height) + 0.5) / height
    lat = lat[:, None]
    cos_lat = np.cos(lat)
    dirs = np.empty((height, width, 3), np.float64)
    dirs[..., 0] = cos_lat * np.sin(lon)[None, :]
    dirs[..., 1] = np.broadcast_to(np.sin(lat), (height, width))
    dirs[..., 2] = cos_lat * np.cos(lon)[None, :]
    return dirs


def directions_to_pixels(dirs: np.ndarray, height: int, width: int):
    """Map unit directions to fractional equirect pixel coordinates.

    Returns (rows, cols) float arrays; cols are not wrapped into [0, W).
    """
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    lon = np.arctan2(x, z)
    lat = np.arcsin(np.clip(y, -1.0, 1.0))
    cols = (lon + np.pi) / (2.0 * np.pi) * width - 0.5
    rows = (np.pi / 2.0 - lat) / np.pi * height - 0.5
    return rows, cols


def pixel_solid_angles(height: int, width: int) -> np.ndarray:
    """Per-pixel solid angle in steradians, (height, width), rows sum to 4*pi."""
    edges = np.pi / 2.0 - np.pi * np.arange(height + 1) / height
    band = np.sin(edges[:-1]) - np.sin(edges[1:])
    return np.broadcast_to((2.0 * np.pi / width) * band[:, None], (height, width)).copy()


def sample_bilinear(grid: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                    wrap_x: bool = True) -> np.ndarray:
    """Bilinear lookup at fractional (rows, cols).

    Horizontal coordinates wrap modulo width when wrap_x, otherwise clamp;
    vertical coordinates always clamp (edge replication).
    """
    h, w = grid.shape[:2]
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fy = (rows - r0)[..., None] if grid.ndim == 3 else rows - r0
    fx = (cols - c0)[..., None] if grid.ndim == 3 else cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    r0c = np.clip(r0, 0, h - 1)
    r1c = np.clip(r0 + 1, 0, h - 1)
    if wrap_x:
        c0c = c0 % w
        c1c = (c0 + 1) % w
    else:
        c0c = np.clip(c0, 0, w - 1)
        c1c = np.clip(c0 + 1, 0, w - 1)
    v00 = grid[r0c, c0c]
    v01 = grid[r0c, c1c]
    v10 = grid[r1c, c0c]
    v11 = grid[r1c, c1c]
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    return top + (bot - top) * fy


def sample_nearest(grid: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                   wrap_x: bool = True) -> np.ndarray:
    """Nearest-neighbor lookup; keeps the grid dtype (masks stay boolean)."""
    h, w = grid.shape[:2]
    r = np.clip(np.floor(rows + 0.5).astype(np.int64), 0, h - 1)
    c = np.floor(cols + 0.5).astype(np.int64)
    c = c % w if wrap_x else np.clip(c, 0, w - 1)
    return grid[r, c]


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x_up(a: float) -> np.ndarray:
    # Positive angle tilts the optical axis toward +Y.
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def camera_rotation(cam: PerspectiveCamera) -> np.ndarray:
    """Camera-to-world rotation matrix (3, 3)."""
    return (
        _rot_y(np.radians(cam.yaw))
        @ _rot_x_up(np.radians(cam.pitch))
        @ _rot_z(np.radians(cam.roll))
    )


def rotation_to_angles(rot: np.ndarray) -> tuple[float, float, float]:
    """Recover (yaw, pitch, roll) in degrees from a camera-to-world rotation."""
    fwd = rot[:, 2]
    pitch = np.arcsin(np.clip(fwd[1], -1.0, 1.0))
    if abs(fwd[1]) < 1.0 - 1e-12:
        yaw = np.arctan2(fwd[0], fwd[2])
    else:
        yaw = 0.0  # gimbal: fold everything residual into roll
    rest = _rot_x_up(-pitch) @ _rot_y(-yaw) @ rot
    roll = np.arctan2(rest[1, 0], rest[0, 0])
    return float(np.degrees(yaw)), float(np.degrees(pitch)), float(np.degrees(roll))


def camera_ray_grid(cam: PerspectiveCamera) -> np.ndarray:
    """Unit world-space ray directions per pixel center, (h, w, 3) float64."""
    f = cam.focal
    x = (np.arange(cam.width) + 0.5 - cam.width / 2.0) / f
    y = (cam.height / 2.0 - np.arange(cam.height) - 0.5) / f
    rays = np.empty((cam.height, cam.width, 3), np.float64)
    rays[..., 0] = x[None, :]
    rays[..., 1] = y[:, None]
    rays[..., 2] = 1.0
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    return rays @ camera_rotation(cam).T


def frustum_mask(dirs: np.ndarray, cam: PerspectiveCamera) -> np.ndarray:
    """True where world directions fall inside the camera frustum."""
    rot = camera_rotation(cam)
    d = dirs @ rot  # world -> camera
    z = d[..., 2]
    tan_h = 0.5 * cam.width / cam.focal
    tan_v = 0.5 * cam.height / cam.focal
    with np.errstate(invalid="ignore"):
        return (z > 0.0) & (np.abs(d[..., 0]) <= tan_h * z) & (np.abs(d[..., 1]) <= tan_v * z)


def _camera_pixel_coords(dirs: np.ndarray, cam: PerspectiveCamera):
    """Project world directions into fractional pixel coords of cam.

    Returns (rows, cols, in_front) where in_front is the z > 0 mask; callers
    combine with frustum_mask for full membership.
    """
    rot = camera_rotation(cam)
    d = dirs @ rot
    z = d[..., 2]
    in_front = z > 0.0
    f = cam.focal
    with np.errstate(divide="ignore", invalid="ignore"):
        cols = f * d[..., 0] / z + cam.width / 2.0 - 0.5
        rows = cam.height / 2.0 - f * d[..., 1] / z - 0.5
    return rows, cols, in_front


def project(pano: np.ndarray, cam: PerspectiveCamera, mode: str = "bilinear") -> np.ndarray:
    """Resample an equirect image into a perspective view.

    Args:
        pano: (H, W) or (H, W, C) equirect image with W == 2H.
        cam: target camera. Its position is ignored, the panorama has a
            single viewpoint.
        mode: "bilinear" for value grids, "nearest" for masks and labels.

    Returns:
        (cam.height, cam.width) or (..., C) array of samples, dtype preserved
        for nearest mode and promoted to float for bilinear. Every output
        pixel is defined since the panorama covers all directions.
    """
    check_panorama_shape(pano, "project input")
    rays = camera_ray_grid(cam)
    rows, cols = directions_to_pixels(rays, pano.shape[0], pano.shape[1])
    if mode == "bilinear":
        return sample_bilinear(pano, rows, cols, wrap_x=True)
    if mode == "nearest":
        return sample_nearest(pano, rows, cols, wrap_x=True)
    raise ValueError(f"unknown sampling mode {mode!r}")


def backproject(image: np.ndarray, cam: PerspectiveCamera, height: int, width: int,
                valid: np.ndarray | None = None):
    """Resample a perspective image back onto the equirect grid.

    Args:
        image: (h, w) or (h, w, C) perspective image.
        cam: camera the image was taken with.
        height, width: output panorama size (width == 2*height).
        valid: optional (h, w) bool mask of usable source pixels.

    Returns:
        (pano, coverage) where pano is float with zeros outside coverage and
        coverage marks panorama pixels whose direction lies in the frustum
        and whose bilinear footprint touches at least one valid source pixel.
    """
    if width != 2 * height:
        raise ValueError(f"backproject needs width == 2*height, got {height}x{width}")
    dirs = make_direction_grid(height, width)
    rows, cols, _ = _camera_pixel_coords(dirs, cam)
    member = frustum_mask(dirs, cam)
    rows = np.where(member, rows, 0.0)
    cols = np.where(member, cols, 0.0)

    img = image.astype(np.float64) if image.dtype != np.float64 else image
    if valid is None:
        sampled = sample_bilinear(img, rows, cols, wrap_x=False)
        coverage = member
    else:
        vf = valid.astype(np.float64)
        weight = sample_bilinear(vf, rows, cols, wrap_x=False)
        masked = img * (vf[..., None] if img.ndim == 3 else vf)
        sampled = sample_bilinear(masked, rows, cols, wrap_x=False)
        coverage = member & (weight > 1e-12)
        with np.errstate(invalid="ignore", divide="ignore"):
            sampled = np.where(
                (weight > 1e-12)[..., None] if img.ndim == 3 else weight > 1e-12,
                sampled / (weight[..., None] if img.ndim == 3 else weight),
                0.0,
            )
    keep = coverage[..., None] if img.ndim == 3 else coverage
    return np.where(keep, sampled, 0.0), coverage


def icosahedron_axes() -> np.ndarray:
    """The 20 face-center unit axes of a regular icosahedron, (20, 3).

    Axes come in antipodal pairs and the minimum pairwise angle is
    arccos(sqrt(5)/3), about 41.81 deg. Order is lexicographic so rig
    manifests are reproducible.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            verts += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    verts = np.array(verts)
    # Faces are vertex triples at the edge distance 2 (circumradius sqrt(phi+2)).
    n = len(verts)
    centers = []
    for i in range(n):
        for j in range(i + 1, n):
            if abs(np.linalg.norm(verts[i] - verts[j]) - 2.0) > 1e-9:
                continue
            for k in range(j + 1, n):
                if (abs(np.linalg.norm(verts[i] - verts[k]) - 2.0) < 1e-9
                        and abs(np.linalg.norm(verts[j] - verts[k]) - 2.0) < 1e-9):
                    c = verts[i] + verts[j] + verts[k]
                    centers.append(c / np.linalg.norm(c))
    axes = np.array(centers)
    order = np.lexsort((axes[:, 2], axes[:, 1], axes[:, 0]))
    return axes[order]


def camera_from_axis(axis: np.ndarray, fov: float, width: int, height: int,
                     name: str = "cam") -> PerspectiveCamera:
    """Camera looking along axis with up aligned to world up.

    Camera up is world up projected onto the plane orthogonal to the axis.
    Within 0.5 deg of either pole that projection degenerates, so world +Z
    is used as the up reference instead.
    """
    axis = np.asarray(axis, np.float64)
    axis = axis / np.linalg.norm(axis)
    up_ref = np.array([0.0, 1.0, 0.0])
    if abs(axis[1]) > np.cos(np.radians(POLE_EPS_DEG)):
        up_ref = np.array([0.0, 0.0, 1.0])
    up = up_ref - np.dot(up_ref, axis) * axis
    up /= np.linalg.norm(up)
    right = np.cross(up, axis)
    rot = np.stack([right, up, axis], axis=1)
    yaw, pitch, roll = rotation_to_angles(rot)
    return PerspectiveCamera(name, yaw, pitch, roll, fov, width, height)


def icosahedron_rig(fov: float = 90.0, width: int = 128, height: int = 128,
                    name_prefix: str = "ico") -> list[PerspectiveCamera]:
    """20 cameras on the icosahedron face axes, all at the panorama center.

    A fov below ICOSAHEDRON_COVERAGE_FOV_DEG cannot cover the full sphere
    and triggers a warning.
    """
    if fov < ICOSAHEDRON_COVERAGE_FOV_DEG:
        warnings.warn(
            f"fov {fov:.2f} deg is below the icosahedron coverage bound "
            f"{ICOSAHEDRON_COVERAGE_FOV_DEG:.2f} deg; the rig will leave gaps",
            stacklevel=2,
        )
    return [
        camera_from_axis(axis, fov, width, height, name=f"{name_prefix}{i:02d}")
        for i, axis in enumerate(icosahedron_axes())
    ]

"""Aligning per-view affine-ambiguous depth maps into one panoramic field.

Each perspective depth map is trusted only up to a positive scale and a
per-pixel shift. The field and the per-view corrections are optimized
jointly: the data term ties corrected depths to the field, a scale prior
keeps the corrections near identity, and a smoothness term keeps each
shift grid slowly varying.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import Adam, GeometricField, sigmoid, softplus, softplus_inverse
from .geometry import PerspectiveCamera, camera_ray_grid, make_direction_grid


class OptimizationError(RuntimeError):
    """Raised when the training loss turns non-finite."""

    def __init__(self, iteration: int, last_loss: float | None):
        self.iteration = iteration
        self.last_loss = last_loss
        tail = f"last finite total loss {last_loss:.6g}" if last_loss is not None else \
            "no finite iterations completed"
        super().__init__(f"non-finite loss at iteration {iteration}; {tail}")


@dataclass
class AlignConfig:
    """Optimization settings shared by first-frame and per-frame alignment.

    The shift smoothness weight is held at zero for the first shift_delay
    steps so the shift grids can absorb gross misalignment before being
    smoothed.
    """

    iterations: int = 3000
    shift_delay: int = 1500
    frame_iterations: int = 1000
    rays_per_step: int = 4096
    learning_rate: float = 1e-3
    lambda_depth: float = 1.0
    lambda_scale: float = 0.1
    lambda_shift: float = 1.0
    lambda_first: float = 1.0
    lambda_pre: float = 1.0
    tau_flow: float = 1.0
    seed: int = 0
    hidden: int = 128
    layers: int = 4
    octaves: int = 6

    def __post_init__(self) -> None:
        for name in ("lambda_depth", "lambda_scale", "lambda_shift",
                     "lambda_first", "lambda_pre"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.iterations < 1 or self.frame_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.rays_per_step < 1:
            raise ValueError("rays_per_step must be >= 1")


@dataclass
class ViewAffine:
    """Per-view correction: positive scale via softplus(alpha), shift grid beta."""

    alpha: np.ndarray
    beta: np.ndarray

    @property
    def scale(self) -> float:
        return float(softplus(self.alpha))


def init_view_affine(height: int, width: int, dtype=np.float32) -> ViewAffine:
    """Identity-start correction: softplus(alpha) == 1, beta == 0."""
    alpha = np.array(softplus_inverse(1.0), dtype)
    return ViewAffine(alpha=alpha, beta=np.zeros((height, width), dtype))


@dataclass
class FirstFrameResult:
    field: GeometricField
    depth: np.ndarray
    affines: list[ViewAffine]
    history: np.ndarray  # (iterations, 4): total, depth, scale, shift


def shift_smoothness(beta: np.ndarray):
    """Mean squared forward difference over the grid and its gradient."""
    h, w = beta.shape
    n = h * (w - 1) + (h - 1) * w
    if n == 0:
        return 0.0, np.zeros_like(beta)
    dh = beta[:, 1:] - beta[:, :-1]
    dv = beta[1:, :] - beta[:-1, :]
    loss = (np.sum(np.square(dh)) + np.sum(np.square(dv))) / n
    grad = np.zeros_like(beta)
    grad[:, 1:] += dh
    grad[:, :-1] -= dh
    grad[1:, :] += dv
    grad[:-1, :] -= dv
    grad *= 2.0 / n
    return float(loss), grad


def spatial_losses(field: GeometricField, affine: ViewAffine, depth: np.ndarray,
                   rays: np.ndarray, pixel_index: np.ndarray | None = None):
    """Loss terms for one view without gradients.

    Args:
        field: current geometric field.
        affine: the view's correction parameters.
        depth: (h, w) raw depth map of the view.
        rays: (N, 3) world directions of the sampled pixels, or the full
            (h, w, 3) grid when pixel_index is None.
        pixel_index: flat indices of the sampled pixels into depth and beta.

    Returns:
        (depth_term, scale_term, shift_term). The shift term is always
        evaluated on the full beta grid.
    """
    flat_depth = depth.ravel()
    flat_beta = affine.beta.ravel()
    if pixel_index is None:
        idx = np.arange(flat_depth.size)
    else:
        idx = np.asarray(pixel_index)
    pred = field.forward(field.encode(np.asarray(rays).reshape(-1, 3)))
    scale = softplus(affine.alpha)
    residual = scale * flat_depth[idx] + flat_beta[idx] - pred
    depth_term = float(np.mean(np.square(residual)))
    scale_term = float(np.square(scale - 1.0))
    shift_term, _ = shift_smoothness(affine.beta)
    return depth_term, scale_term, shift_term


def spatial_step(field: GeometricField, affine: ViewAffine, flat_depth: np.ndarray,
                 enc: np.ndarray, idx: np.ndarray, lam_depth: float,
                 lam_scale: float, lam_shift: float):
    """Fused loss and gradients for one sampled view.

    Returns (terms, field_grads, alpha_grad, beta_grad) where terms is the
    tuple (depth, scale, shift) of unweighted loss values.
    """
    pred, cache = field.forward(enc, want_cache=True)
    d = flat_depth[idx]
    b = affine.beta.ravel()[idx]
    scale = softplus(affine.alpha)
    residual = scale * d + b - pred
    n = residual.size
    depth_term = float(np.mean(np.square(residual)))
    scale_term = float(np.square(scale - 1.0))

    field_grads = field.backward(cache, (-2.0 * lam_depth / n) * residual)

    dscale = lam_depth * (2.0 / n) * float(residual @ d) \
        + lam_scale * 2.0 * (float(scale) - 1.0)
    alpha_grad = np.asarray(dscale * sigmoid(affine.alpha), affine.alpha.dtype)

    beta_grad = np.zeros_like(affine.beta)
    np.add.at(beta_grad.ravel(), idx, (2.0 * lam_depth / n) * residual)
    shift_term, shift_grad = shift_smoothness(affine.beta)
    if lam_shift != 0.0:
        beta_grad += lam_shift * shift_grad
    return (depth_term, scale_term, shift_term), field_grads, alpha_grad, beta_grad


def view_direction_sets(rig: list[PerspectiveCamera], dtype=np.float32) -> list[np.ndarray]:
    """Flattened per-view world ray directions, one (h*w, 3) array per camera."""
    return [camera_ray_grid(cam).reshape(-1, 3).astype(dtype) for cam in rig]


def _check_view_depths(depths, rig) -> list[np.ndarray]:
    if len(depths) != len(rig):
        raise ValueError(f"got {len(depths)} depth maps for {len(rig)} cameras")
    out = []
    for cam, d in zip(rig, depths):
        d = np.asarray(d, np.float32)
        if d.shape != (cam.height, cam.width):
            raise ValueError(
                f"depth for {cam.name} has shape {d.shape}, camera is "
                f"{cam.height}x{cam.width}")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValueError(f"depth for {cam.name} must be finite and non-negative")
        out.append(d)
    return out


def align_first_frame(frame: np.ndarray, depths, rig: list[PerspectiveCamera],
                      cfg: AlignConfig) -> FirstFrameResult:
    """Fit the field and per-view corrections to the first frame's views.

    Args:
        frame: (H, W, 3) equirect frame; only its size is used here.
        depths: per-camera (h, w) raw depth maps, same order as rig.
        rig: the perspective cameras the depths belong to.
        cfg: optimization settings.

    Returns:
        FirstFrameResult with the trained field, the panoramic depth on the
        frame's grid, the per-view corrections, and the loss history.

    Raises:
        OptimizationError: if the loss becomes non-finite.
    """
    height, width = frame.shape[:2]
    depths = _check_view_depths(depths, rig)
    flat_depths = [d.ravel() for d in depths]
    dirs = view_direction_sets(rig)

    fld = GeometricField(hidden=cfg.hidden, layers=cfg.layers,
                         octaves=cfg.octaves, seed=cfg.seed)
    affines = [init_view_affine(cam.height, cam.width) for cam in rig]
    params = fld.params + [a.alpha for a in affines] + [a.beta for a in affines]
    opt = Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)

    n_views = len(rig)
    n_field = len(fld.params)
    history = np.zeros((cfg.iterations, 4), np.float64)
    for it in range(cfg.iterations):
        view = int(rng.integers(n_views))
        idx = rng.integers(flat_depths[view].size, size=cfg.rays_per_step)
        lam_shift = 0.0 if it < cfg.shift_delay else cfg.lambda_shift
        enc = fld.encode(dirs[view][idx])
        terms, fgrads, ga, gb = spatial_step(
            fld, affines[view], flat_depths[view], enc, idx,
            cfg.lambda_depth, cfg.lambda_scale, lam_shift)
        total = (cfg.lambda_depth * terms[0] + cfg.lambda_scale * terms[1]
                 + lam_shift * terms[2])
        if not np.isfinite(total):
            last = history[it - 1, 0] if it > 0 else None
            raise OptimizationError(it, last)
        history[it] = (total, *terms)
        grads: list[np.ndarray | None] = list(fgrads) + [None] * (2 * n_views)
        grads[n_field + view] = ga
        grads[n_field + n_views + view] = gb
        opt.step(params, grads)

    pano = fld.evaluate(make_direction_grid(height, width))
    return FirstFrameResult(field=fld, depth=pano, affines=affines, history=history)

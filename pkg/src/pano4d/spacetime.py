"""Sequential per-frame alignment of a panoramic video.

Frame 1 fixes the static geometry. Every later frame warm-starts its field
from the previous frame and is optimized only inside the motion regions:
views that see no motion are skipped entirely, pixels outside the motion
union are anchored to the first frame's depth, and pixels in earlier
motion regions but not the current one are anchored to the previous frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import (
    AlignConfig,
    FirstFrameResult,
    OptimizationError,
    ViewAffine,
    align_first_frame,
    init_view_affine,
    spatial_step,
)
from .field import Adam, GeometricField
from .geometry import PerspectiveCamera, camera_ray_grid, frustum_mask, make_direction_grid
from .motion import ViewSelection, per_frame_regions, select_views


@dataclass
class FrameAlignResult:
    frame_index: int
    field: GeometricField
    depth: np.ndarray
    selection: ViewSelection
    affines: dict[int, ViewAffine]
    history: np.ndarray  # (iters, 6): total, depth, scale, shift, first, pre
    unsupervised_pixels: int
    skipped: bool


@dataclass
class VideoDepthResult:
    depths: np.ndarray  # (L, H, W)
    first: FirstFrameResult
    frames: list[FrameAlignResult]
    regions: list[np.ndarray]
    union: np.ndarray
    logs: list[dict]


def temporal_losses(field: GeometricField, first_depth: np.ndarray,
                    prev_depth: np.ndarray, union: np.ndarray,
                    region: np.ndarray, dirs: np.ndarray | None = None):
    """Anchoring terms for one frame, evaluated on their full supports.

    The first-frame term covers pixels outside the motion union, the
    previous-frame term covers pixels inside the union but outside the
    current frame's region. An empty support contributes zero.

    Returns (first_term, pre_term).
    """
    h, w = first_depth.shape
    if dirs is None:
        dirs = make_direction_grid(h, w)
    sup_first = ~union
    sup_pre = union & ~region
    first_term = 0.0
    pre_term = 0.0
    if sup_first.any():
        pred = field.evaluate(dirs[sup_first])
        first_term = float(np.mean(np.square(first_depth[sup_first] - pred)))
    if sup_pre.any():
        pred = field.evaluate(dirs[sup_pre])
        pre_term = float(np.mean(np.square(prev_depth[sup_pre] - pred)))
    return first_term, pre_term


def anchor_step(field: GeometricField, dirs: np.ndarray, target: np.ndarray,
                lam: float):
    """Squared-error anchor toward fixed target depths along given rays.

    Returns (term, field_grads): the unweighted mean squared residual and
    the gradient of lam times that term with respect to the field.
    """
    pred, cache = field.forward(field.encode(dirs), want_cache=True)
    residual = target - pred
    term = float(np.mean(np.square(residual)))
    grads = field.backward(cache, (-2.0 * lam / residual.size) * residual)
    return term, grads


def _depth_of(provider, frame_index: int, view_index: int) -> np.ndarray:
    if callable(provider):
        return np.asarray(provider(frame_index, view_index), np.float32)
    return np.asarray(provider[frame_index - 1][view_index], np.float32)


def align_frame(frame_index: int, depths_by_view: dict[int, np.ndarray],
                selection: ViewSelection, region: np.ndarray, union: np.ndarray,
                first_depth: np.ndarray, prev_depth: np.ndarray,
                prev_field: GeometricField, rig: list[PerspectiveCamera],
                cfg: AlignConfig) -> FrameAlignResult:
    """Optimize one frame's field against its selected views.

    With no selected views the previous field and depth are carried over
    unchanged. Otherwise the field starts as an exact copy of the previous
    frame's parameters and per-view corrections start at identity.
    """
    height, width = first_depth.shape
    dirs_grid = make_direction_grid(height, width)
    sel = selection.indices

    fld = prev_field.copy()
    if not sel:
        return FrameAlignResult(
            frame_index=frame_index, field=fld, depth=prev_depth.copy(),
            selection=selection, affines={}, history=np.zeros((0, 6)),
            unsupervised_pixels=_unsupervised_count(region, rig, sel, dirs_grid),
            skipped=True)

    view_dirs = {i: camera_ray_grid(rig[i]).reshape(-1, 3).astype(np.float32)
                 for i in sel}
    flat_depths = {}
    affines = {}
    for i in sel:
        if i not in depths_by_view:
            raise ValueError(f"missing depth map for selected view {i}")
        d = np.asarray(depths_by_view[i], np.float32)
        cam = rig[i]
        if d.shape != (cam.height, cam.width):
            raise ValueError(f"depth for view {i} has shape {d.shape}, camera is "
                             f"{cam.height}x{cam.width}")
        flat_depths[i] = d.ravel()
        affines[i] = init_view_affine(cam.height, cam.width)

    pano_flat = dirs_grid.reshape(-1, 3).astype(np.float32)
    first_flat = first_depth.astype(np.float32).ravel()
    prev_flat = prev_depth.astype(np.float32).ravel()
    sup_first = np.flatnonzero(~union.ravel())
    sup_pre = np.flatnonzero(union.ravel() & ~region.ravel())

    params = fld.params + [affines[i].alpha for i in sel] + [affines[i].beta for i in sel]
    opt = Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + frame_index)
    n_field = len(fld.params)
    pos_of = {i: k for k, i in enumerate(sel)}
    rays = cfg.rays_per_step
    history = np.zeros((cfg.frame_iterations, 6), np.float64)

    for it in range(cfg.frame_iterations):
        view = sel[int(rng.integers(len(sel)))]
        aff = affines[view]
        idx = rng.integers(flat_depths[view].size, size=rays)
        enc = fld.encode(view_dirs[view][idx])
        terms, field_grads, alpha_grad, beta_grad = spatial_step(
            fld, aff, flat_depths[view], enc, idx,
            cfg.lambda_depth, cfg.lambda_scale, cfg.lambda_shift)
        depth_term, scale_term, shift_term = terms

        first_term = 0.0
        if sup_first.size:
            f_idx = sup_first[rng.integers(sup_first.size, size=rays)]
            first_term, grads_f = anchor_step(
                fld, pano_flat[f_idx], first_flat[f_idx], cfg.lambda_first)
            field_grads = [g + gf for g, gf in zip(field_grads, grads_f)]
        pre_term = 0.0
        if sup_pre.size:
            p_idx = sup_pre[rng.integers(sup_pre.size, size=rays)]
            pre_term, grads_p = anchor_step(
                fld, pano_flat[p_idx], prev_flat[p_idx], cfg.lambda_pre)
            field_grads = [g + gp for g, gp in zip(field_grads, grads_p)]

        total = (cfg.lambda_depth * depth_term + cfg.lambda_scale * scale_term
                 + cfg.lambda_shift * shift_term + cfg.lambda_first * first_term
                 + cfg.lambda_pre * pre_term)
        if not np.isfinite(total):
            last = history[it - 1, 0] if it > 0 else None
            raise OptimizationError(it, last)
        history[it] = (total, depth_term, scale_term, shift_term, first_term, pre_term)

        grads: list[np.ndarray | None] = list(field_grads) + [None] * (2 * len(sel))
        grads[n_field + pos_of[view]] = alpha_grad
        grads[n_field + len(sel) + pos_of[view]] = beta_grad
        opt.step(params, grads)

    depth = fld.evaluate(dirs_grid)
    return FrameAlignResult(
        frame_index=frame_index, field=fld, depth=depth, selection=selection,
        affines=affines, history=history,
        unsupervised_pixels=_unsupervised_count(region, rig, sel, dirs_grid),
        skipped=False)


def _unsupervised_count(region: np.ndarray, rig, sel: list[int],
                        dirs_grid: np.ndarray) -> int:
    """Motion pixels no selected view can see; logged, never fatal."""
    if not region.any():
        return 0
    seen = np.zeros(region.shape, bool)
    for i in sel:
        seen |= frustum_mask(dirs_grid, rig[i])
    return int((region & ~seen).sum())


def align_video(video: np.ndarray, view_depths, flows: np.ndarray,
                rig: list[PerspectiveCamera], cfg: AlignConfig) -> VideoDepthResult:
    """Align a panoramic video into a temporally consistent depth sequence.

    Args:
        video: (L, H, W, 3) frames.
        view_depths: provider of raw per-view depth maps. Either a callable
            (frame_index, view_index) -> (h, w) array with frame_index
            1-based, or a nested sequence indexed [frame-1][view]. Only
            selected views are requested for frames after the first.
        flows: (L-1, H, W, 2) flow fields between consecutive frames.
        rig: the perspective camera set.
        cfg: optimization settings.

    Returns:
        VideoDepthResult with per-frame depths, motion regions, per-frame
        selections and a line-oriented log summary.
    """
    n_frames = len(video)
    first_views = [_depth_of(view_depths, 1, i) for i in range(len(rig))]
    first = align_first_frame(video[0], first_views, rig, cfg)
    logs = [{
        "frame": 1, "views": len(rig), "skipped": False,
        "unsupervised": 0, "loss": float(first.history[-1, 0]),
    }]
    depths = [first.depth.astype(np.float32)]
    results: list[FrameAlignResult] = []

    if n_frames == 1:
        return VideoDepthResult(depths=np.stack(depths), first=first, frames=[],
                                regions=[], union=np.zeros(video.shape[1:3], bool),
                                logs=logs)

    if len(flows) != n_frames - 1:
        raise ValueError(f"need {n_frames - 1} flow fields, got {len(flows)}")
    regions, union = per_frame_regions(flows, tau=cfg.tau_flow)

    prev_field = first.field
    prev_depth = first.depth
    for l in range(2, n_frames + 1):
        region = regions[l - 1]
        selection = select_views(region, rig)
        by_view = {i: _depth_of(view_depths, l, i) for i in selection.indices}
        res = align_frame(l, by_view, selection, region, union,
                          first.depth, prev_depth, prev_field, rig, cfg)
        results.append(res)
        depths.append(res.depth.astype(np.float32))
        logs.append({
            "frame": l, "views": len(selection.indices), "skipped": res.skipped,
            "unsupervised": res.unsupervised_pixels,
            "loss": float(res.history[-1, 0]) if len(res.history) else float("nan"),
        })
        prev_field = res.field
        prev_depth = res.depth

    return VideoDepthResult(depths=np.stack(depths), first=first, frames=results,
                            regions=regions, union=union, logs=logs)

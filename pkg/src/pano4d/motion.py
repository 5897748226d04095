"""Optical-flow motion masks and view selection.

Flow u components are horizontal displacements on a wrapping longitude
axis; all magnitude tests use the shortest wrapped distance. Masks chain
source pixels, splatted destinations and the next frame's sources into
per-frame motion regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PerspectiveCamera, project


def validate_flow(flow: np.ndarray) -> np.ndarray:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got shape {flow.shape}")
    h, w = flow.shape[:2]
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    if np.any(np.abs(flow[..., 0]) > w) or np.any(np.abs(flow[..., 1]) > h):
        raise ValueError("flow displacements exceed the image size")
    return flow


def wrap_u(u: np.ndarray, width: int) -> np.ndarray:
    """Shortest horizontal displacement on a wrapping axis of given width."""
    return (u + width / 2.0) % width - width / 2.0


def source_mask(flow: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Pixels whose wrapped flow magnitude strictly exceeds tau."""
    flow = validate_flow(flow)
    u = wrap_u(flow[..., 0], flow.shape[1])
    return np.hypot(u, flow[..., 1]) > tau


def destination_mask(mask: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Forward-splat a mask along the flow.

    Every true pixel marks the up-to-four pixels under its bilinear
    footprint at the destination; integer displacements mark exactly one.
    Columns wrap, rows that land outside the image are dropped.
    """
    flow = validate_flow(flow)
    h, w = mask.shape
    jj, kk = np.nonzero(mask)
    if len(jj) == 0:
        return np.zeros_like(mask, dtype=bool)
    r = jj + flow[jj, kk, 1]
    c = kk + flow[jj, kk, 0]
    out = np.zeros((h, w), bool)
    r0 = np.floor(r)
    c0 = np.floor(c)
    for rr in (r0, np.ceil(r)):
        for cc in (c0, np.ceil(c)):
            keep = (rr >= 0) & (rr <= h - 1)
            out[rr[keep].astype(np.int64), cc[keep].astype(np.int64) % w] = True
    return out


def per_frame_regions(flows: np.ndarray, tau: float = 1.0):
    """Motion region per frame and their union.

    Args:
        flows: (L-1, H, W, 2) flow fields between consecutive frames.
        tau: magnitude threshold for source masks.

    Returns:
        (regions, union): a list of L boolean (H, W) masks where entry
        l-1 combines the previous frame's sources, their splatted
        destinations and the current sources, and the union over all
        frames.
    """
    n = len(flows)
    if n == 0:
        raise ValueError("need at least one flow field (two frames)")
    sources = [source_mask(f, tau) for f in flows]
    dests = [destination_mask(sources[i], flows[i]) for i in range(n)]
    regions = [sources[0]]
    for l in range(1, n):
        regions.append(sources[l - 1] | dests[l - 1] | sources[l])
    regions.append(sources[n - 1] | dests[n - 1])
    union = np.zeros_like(regions[0])
    for r in regions:
        union |= r
    return regions, union


@dataclass
class ViewSelection:
    """Views whose projection overlaps a motion region."""

    indices: list[int]
    counts: np.ndarray

    def __contains__(self, index: int) -> bool:
        return index in self.indices


def select_views(region: np.ndarray, rig: list[PerspectiveCamera]) -> ViewSelection:
    """Select cameras that see any pixel of the motion region.

    The region is projected into each camera with nearest-neighbor
    sampling; a camera is selected when at least one projected pixel is
    true.
    """
    counts = np.zeros(len(rig), np.int64)
    for i, cam in enumerate(rig):
        counts[i] = int(project(region, cam, mode="nearest").sum())
    return ViewSelection(indices=[i for i, c in enumerate(counts) if c > 0],
                         counts=counts)


def block_matching_flow(frame_a: np.ndarray, frame_b: np.ndarray,
                        block: int = 8, search: int = 6) -> np.ndarray:
    """Integer block-matching flow from frame_a to frame_b.

    Minimizes the sum of absolute differences per block over displacements
    in [-search, search]^2, ties broken toward zero displacement. Columns
    wrap, rows clamp. The winning displacement is replicated to every pixel
    of its block.
    """
    if frame_a.shape != frame_b.shape:
        raise ValueError("frames must have identical shapes")
    a = np.asarray(frame_a, np.float32)
    b = np.asarray(frame_b, np.float32)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w = a.shape[:2]
    row_starts = np.arange(0, h, block)
    col_starts = np.arange(0, w, block)
    cands = [(du, dv) for dv in range(-search, search + 1)
             for du in range(-search, search + 1)]
    cands.sort(key=lambda c: (c[0] * c[0] + c[1] * c[1], c[1], c[0]))
    rows = np.arange(h)
    cols = np.arange(w)
    sads = np.empty((len(cands), len(row_starts), len(col_starts)), np.float32)
    for ci, (du, dv) in enumerate(cands):
        rr = np.clip(rows + dv, 0, h - 1)
        cc = (cols + du) % w
        diff = np.abs(a - b[rr][:, cc]).sum(axis=2)
        per_row = np.add.reduceat(diff, row_starts, axis=0)
        sads[ci] = np.add.reduceat(per_row, col_starts, axis=1)
    best = np.argmin(sads, axis=0)
    du = np.array([c[0] for c in cands], np.float32)[best]
    dv = np.array([c[1] for c in cands], np.float32)[best]
    flow = np.empty((h, w, 2), np.float32)
    flow[..., 0] = np.repeat(np.repeat(du, block, axis=0), block, axis=1)[:h, :w]
    flow[..., 1] = np.repeat(np.repeat(dv, block, axis=0), block, axis=1)[:h, :w]
    return flow


def warp_by_flow(frame: np.ndarray, flow: np.ndarray):
    """Forward-warp an image by a flow field with bilinear splatting.

    Returns (warped, covered) where covered is False for pixels that
    received no contribution.
    """
    flow = validate_flow(flow)
    img = np.asarray(frame, np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    jj, kk = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    r = jj + flow[..., 1]
    c = kk + flow[..., 0]
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = r - r0
    fc = c - c0
    acc = np.zeros((h, w, img.shape[2]), np.float64)
    wacc = np.zeros((h, w), np.float64)
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = r0 + dr
        keep = (rr >= 0) & (rr <= h - 1) & (wgt > 0)
        rk = rr[keep]
        ck = (c0 + dc)[keep] % w
        np.add.at(acc, (rk, ck), img[keep] * wgt[keep][:, None])
        np.add.at(wacc, (rk, ck), wgt[keep])
    covered = wacc > 1e-9
    out = np.where(covered[..., None], acc / np.maximum(wacc, 1e-9)[..., None], 0.0)
    if squeeze:
        out = out[..., 0]
    return out.astype(np.float32), covered

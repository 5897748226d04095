"""Longitude-seam tooling for equirect frames.

Frames can be circularly extended (left columns re-appended on the right)
so generation models see the seam context, blended so the duplicated bands
agree, and cropped back. The seam metric quantifies the residual wrap
discontinuity of a finished video.
"""

from __future__ import annotations

import numpy as np

EXTEND_DIVISOR = 240


def circular_extend(frame: np.ndarray) -> np.ndarray:
    """Append a copy of the leftmost W/15 columns to the right edge.

    The width must be divisible by 240 so the extension and the blend
    bands land on whole columns. The result is 16W/15 wide.
    """
    w = frame.shape[1]
    if w % EXTEND_DIVISOR != 0:
        raise ValueError(
            f"width {w} is not divisible by {EXTEND_DIVISOR}; circular extension "
            f"needs whole-column bands of width/15")
    ext = w // 15
    return np.concatenate([frame, frame[:, :ext]], axis=1)


def circular_crop(extended: np.ndarray) -> np.ndarray:
    """Drop the rightmost sixteenth, inverting circular_extend."""
    w = extended.shape[1]
    if w % 16 != 0:
        raise ValueError(f"extended width {w} is not divisible by 16")
    return extended[:, : w - w // 16]


def alternating_blend(grid: np.ndarray, step: int) -> np.ndarray:
    """Pull the duplicated end bands of an extended grid toward each other.

    The bands are the leftmost and rightmost width/16 columns. On even
    steps the right band moves toward the left band under a linear weight
    ramping 1 to 0 across the band; on odd steps the left band moves toward
    the right band under the mirrored ramp. One even step followed by one
    odd step strictly contracts the maximum band difference unless the
    bands already agree. Columns outside the two bands are never touched.
    """
    w = grid.shape[1]
    if w % 16 != 0:
        raise ValueError(f"extended width {w} is not divisible by 16")
    band = w // 16
    out = np.array(grid, copy=True)
    left = out[:, :band]
    right = out[:, w - band:]
    ramp = 1.0 - np.arange(band) / (band - 1) if band > 1 else np.ones(1)
    shape = (1, band) + (1,) * (grid.ndim - 2)
    ramp = ramp.reshape(shape)
    if step % 2 == 0:
        out[:, w - band:] = ramp * left + (1.0 - ramp) * right
    else:
        mirrored = ramp[:, ::-1] if grid.ndim == 2 else ramp[:, ::-1, :]
        out[:, :band] = mirrored * right + (1.0 - mirrored) * left
    return out


def circular_pad(grid: np.ndarray, pad: int) -> np.ndarray:
    """Pad horizontally by wrapping and vertically by edge replication."""
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad >= grid.shape[1]:
        raise ValueError(f"pad {pad} must be smaller than the width {grid.shape[1]}")
    rest = ((0, 0),) * (grid.ndim - 2)
    out = np.pad(grid, ((pad, pad), (0, 0)) + rest, mode="edge")
    return np.pad(out, ((0, 0), (pad, pad)) + rest, mode="wrap")


def seam_metric(video: np.ndarray) -> tuple[float, float]:
    """Wrap discontinuity of a frame or video.

    Returns (color_gap, gradient_gap): the mean absolute difference
    between the last and first columns, and the mean absolute jump in the
    horizontal gradient across the seam. Both are near zero for images
    that are smooth periodic functions of longitude.
    """
    arr = np.asarray(video, np.float64)
    if arr.ndim == 3 and arr.shape[-1] in (1, 3):
        arr = arr[None]
    elif arr.ndim == 2:
        arr = arr[None, ..., None]
    first = arr[:, :, 0]
    last = arr[:, :, -1]
    prev = arr[:, :, -2]
    color_gap = float(np.mean(np.abs(last - first)))
    gradient_gap = float(np.mean(np.abs((first - last) - (last - prev))))
    return color_gap, gradient_gap

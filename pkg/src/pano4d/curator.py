"""Slicing raw panoramic video into shot-consistent training clips.

Videos are subsampled at a fixed interval, scene transitions are detected
from per-pixel gray-level jumps between consecutive sampled frames, frames
around each transition are discarded, and the surviving runs long enough
to train on become clips. Frame numbers in the output always refer to the
original video; the minimum clip length is counted in sampled frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .io import rgb_to_gray601


@dataclass(frozen=True)
class CuratorConfig:
    sample_interval: int = 5
    theta_trans: float = 30.0
    theta_count: float = 0.3
    discard_margin: int = 2
    min_clip_len: int = 25

    def __post_init__(self) -> None:
        if self.sample_interval < 1:
            raise ValueError("sample_interval must be at least 1")
        if self.discard_margin < 0:
            raise ValueError("discard_margin must be non-negative")
        if self.min_clip_len < 1:
            raise ValueError("min_clip_len must be at least 1")
        if self.theta_trans < 0 or self.theta_count < 0:
            raise ValueError("thresholds must be non-negative")


@dataclass(frozen=True)
class Clip:
    """Inclusive frame range in original video numbering."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid clip range [{self.start}, {self.end}]")


@dataclass
class ClipManifest:
    video_id: str
    clips: list[Clip] = field(default_factory=list)
    keyframes: list[int] = field(default_factory=list)


def transition_count(gray_prev: np.ndarray, gray_cur: np.ndarray,
                     theta_trans: float) -> int:
    """Number of pixels whose gray level jumps by more than theta_trans."""
    if gray_prev.shape != gray_cur.shape:
        raise ValueError(
            f"frame shapes differ: {gray_prev.shape} vs {gray_cur.shape}")
    diff = np.abs(np.asarray(gray_cur, np.float64) -
                  np.asarray(gray_prev, np.float64))
    return int(np.count_nonzero(diff > theta_trans))


def is_keyframe(gray_prev: np.ndarray, gray_cur: np.ndarray,
                cfg: CuratorConfig) -> bool:
    """Whether the step between two sampled frames is a scene transition.

    True when the proportion of transitioned pixels exceeds theta_count.
    """
    count = transition_count(gray_prev, gray_cur, cfg.theta_trans)
    return count / gray_cur.size > cfg.theta_count


def slice_video(video: np.ndarray, cfg: CuratorConfig | None = None,
                video_id: str = "video") -> ClipManifest:
    """Split a video into transition-free clips.

    video is (L, H, W, 3) RGB in [0, 1] or pre-converted grayscale
    (L, H, W) on the 0..255 scale the thresholds assume. Sampled
    frame p is original frame p * sample_interval. A keyframe is the
    sampled frame at which a transition lands; it and discard_margin
    sampled neighbors on each side are removed, and each maximal
    surviving run of at least min_clip_len sampled frames is reported as
    a clip spanning the run's original frame numbers.
    """
    cfg = cfg or CuratorConfig()
    arr = np.asarray(video)
    if arr.ndim == 4:
        gray = np.stack([rgb_to_gray601(f) for f in arr])
    elif arr.ndim == 3:
        gray = arr.astype(np.float64, copy=False)
    else:
        raise ValueError(f"expected (L, H, W[, 3]) video, got {arr.shape}")

    sampled = np.arange(0, gray.shape[0], cfg.sample_interval)
    keyframe_pos = [
        p for p in range(1, len(sampled))
        if is_keyframe(gray[sampled[p - 1]], gray[sampled[p]], cfg)
    ]

    keep = np.ones(len(sampled), bool)
    for p in keyframe_pos:
        lo = max(0, p - cfg.discard_margin)
        keep[lo: p + cfg.discard_margin + 1] = False

    manifest = ClipManifest(
        video_id=video_id,
        keyframes=[int(sampled[p]) for p in keyframe_pos])
    run_start = None
    for p in range(len(sampled) + 1):
        if p < len(sampled) and keep[p]:
            if run_start is None:
                run_start = p
        elif run_start is not None:
            if p - run_start >= cfg.min_clip_len:
                manifest.clips.append(
                    Clip(int(sampled[run_start]), int(sampled[p - 1])))
            run_start = None
    return manifest


def write_manifest(path, manifests: list[ClipManifest]) -> None:
    """One line per clip: video id, range, and the video's keyframes."""
    with open(path, "w", encoding="ascii") as fh:
        for man in manifests:
            keys = " ".join(str(k) for k in man.keyframes)
            for clip in man.clips:
                line = f"{man.video_id} {clip.start} {clip.end}"
                fh.write(line + (" " + keys if keys else "") + "\n")


def read_manifest(path) -> list[ClipManifest]:
    """Parse write_manifest output, regrouping lines by video id."""
    by_id: dict[str, ClipManifest] = {}
    with open(path, encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise ValueError(f"manifest line too short: {line!r}")
            vid, start, end = parts[0], int(parts[1]), int(parts[2])
            man = by_id.setdefault(vid, ClipManifest(video_id=vid))
            man.clips.append(Clip(start, end))
            keys = [int(k) for k in parts[3:]]
            if keys:
                man.keyframes = keys
    return list(by_id.values())

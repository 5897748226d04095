"""File formats: PNG frames and masks, PFM depth, .flo flow, PLY point
clouds, and the plain-text camera rig manifest.

All binary formats are little-endian. Readers raise FormatError with the
byte offset of the first inconsistency.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import PerspectiveCamera

FLO_MAGIC = 202021.25

PLY_PROPS = (
    ("float", "x"), ("float", "y"), ("float", "z"),
    ("uchar", "red"), ("uchar", "green"), ("uchar", "blue"),
    ("float", "t"),
)
_PLY_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("t", "<f4"),
])
assert _PLY_DTYPE.itemsize == 19


class FormatError(ValueError):
    """Malformed file content; offset is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def rgb_to_gray601(frame: np.ndarray) -> np.ndarray:
    """BT.601 luma of an RGB image in [0, 1], returned on a 0..255 scale."""
    w = np.array([0.299, 0.587, 0.114], frame.dtype if frame.dtype.kind == "f" else np.float64)
    return (frame[..., :3] @ w) * 255.0


# PNG ------------------------------------------------------------------

def write_frame_png(path: str | Path, frame: np.ndarray) -> None:
    """Write an RGB float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_frame_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG as RGB float32 in [0, 1]."""
    img = Image.open(path).convert("RGB")
    return np.asarray(img, np.float32) / 255.0


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


# PFM ------------------------------------------------------------------

def write_pfm(path: str | Path, depth: np.ndarray) -> None:
    """Write a single-channel float map, little-endian (scale header -1.0).

    Rows are stored bottom to top, which is the PFM convention.
    """
    arr = np.asarray(depth, np.float32)
    if arr.ndim != 2:
        raise ValueError(f"PFM writer takes a 2D array, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(arr[::-1].astype("<f4").tobytes())


def _read_pfm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data) and data[pos : pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("truncated PFM header", start)
    return data[start:pos], pos + 1


def read_pfm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, pos = _read_pfm_token(data, 0)
    if magic != b"Pf":
        raise FormatError(f"bad PFM magic {magic!r}, expected b'Pf'", 0)
    wtok, pos = _read_pfm_token(data, pos)
    htok, pos = _read_pfm_token(data, pos)
    stok, pos = _read_pfm_token(data, pos)
    try:
        w, h, scale = int(wtok), int(htok), float(stok)
    except ValueError as e:
        raise FormatError(f"bad PFM header fields: {e}", 3) from e
    if w <= 0 or h <= 0:
        raise FormatError(f"bad PFM dimensions {w}x{h}", 3)
    end = pos + 4 * w * h
    if len(data) < end:
        raise FormatError(f"PFM data truncated, need {end} bytes have {len(data)}", len(data))
    endian = "<" if scale < 0 else ">"
    arr = np.frombuffer(data[pos:end], dtype=f"{endian}f4").reshape(h, w)
    return arr[::-1].astype(np.float32)


# Middlebury .flo ------------------------------------------------------

def write_flo(path: str | Path, flow: np.ndarray) -> None:
    """Write an (H, W, 2) flow field, channels (u, v), in .flo layout."""
    arr = np.asarray(flow, np.float32)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, arr.shape[1], arr.shape[0]))
        f.write(arr.astype("<f4").tobytes())


def read_flo(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError("flo header truncated", len(data))
    magic, w, h = struct.unpack_from("<fii", data, 0)
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise FormatError(f"bad flo magic {magic}, expected {FLO_MAGIC}", 0)
    if w <= 0 or h <= 0:
        raise FormatError(f"bad flo dimensions {w}x{h}", 4)
    end = 12 + 8 * w * h
    if len(data) < end:
        raise FormatError(f"flo data truncated, need {end} bytes have {len(data)}", len(data))
    return np.frombuffer(data[12:end], dtype="<f4").reshape(h, w, 2).astype(np.float32)


# PLY ------------------------------------------------------------------

def write_ply(path: str | Path, positions: np.ndarray, colors: np.ndarray,
              times: np.ndarray) -> None:
    """Write a timestamped point cloud: float xyz, uchar rgb, float t.

    Each vertex record is 19 bytes. Colors are float in [0, 1] and are
    quantized to 8 bits.
    """
    n = len(positions)
    if len(colors) != n or len(times) != n:
        raise ValueError("positions, colors and times must have equal length")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {t} {name}" for t, name in PLY_PROPS]
    header.append("end_header")
    rec = np.empty(n, _PLY_DTYPE)
    pos = np.asarray(positions, np.float32)
    rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    rgb = np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    rec["t"] = np.asarray(times, np.float32)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a point cloud written by write_ply.

    Returns (positions float32 (N, 3), colors float32 (N, 3) in [0, 1],
    times float32 (N,)).
    """
    data = Path(path).read_bytes()
    lines = []
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FormatError("PLY header has no end_header", len(data))
        lines.append((pos, data[pos:nl].decode("ascii", "replace")))
        pos = nl + 1
        if lines[-1][1] == "end_header":
            break
    off, text = lines[0]
    if text != "ply":
        raise FormatError(f"bad PLY magic line {text!r}", off)
    off, text = lines[1]
    if text != "format binary_little_endian 1.0":
        raise FormatError(f"unsupported PLY format line {text!r}", off)
    off, text = lines[2]
    if not text.startswith("element vertex "):
        raise FormatError(f"expected 'element vertex N', got {text!r}", off)
    try:
        n = int(text.split()[-1])
    except ValueError as e:
        raise FormatError(f"bad vertex count in {text!r}", off) from e
    props = lines[3:-1]
    expected = [f"property {t} {name}" for t, name in PLY_PROPS]
    if [t for _, t in props] != expected:
        bad = next((p for p, e in zip(props, expected + [None] * len(props))
                    if p[1] != e), props[0] if props else lines[-1])
        raise FormatError(f"unexpected PLY property list at {bad[1]!r}", bad[0])
    end = pos + 19 * n
    if len(data) < end:
        raise FormatError(f"PLY data truncated, need {end} bytes have {len(data)}", len(data))
    rec = np.frombuffer(data[pos:end], dtype=_PLY_DTYPE)
    positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float32)
    colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float32) / 255.0
    times = rec["t"].astype(np.float32)
    return positions, colors, times


# Rig manifest ---------------------------------------------------------

def write_rig_manifest(path: str | Path, cameras: list[PerspectiveCamera]) -> None:
    """One camera per line: name yaw pitch roll fov width height px py pz."""
    lines = ["# pano4d camera rig", "# name yaw pitch roll fov width height px py pz"]
    for cam in cameras:
        fields = [cam.name] + [repr(float(v)) for v in (cam.yaw, cam.pitch, cam.roll, cam.fov)]
        fields += [str(cam.width), str(cam.height)]
        fields += [repr(float(v)) for v in cam.position]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_rig_manifest(path: str | Path) -> list[PerspectiveCamera]:
    cameras = []
    for ln, raw in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 10:
            raise FormatError(f"rig manifest line {ln} has {len(parts)} fields, expected 10", ln)
        try:
            cam = PerspectiveCamera(
                name=parts[0],
                yaw=float(parts[1]), pitch=float(parts[2]), roll=float(parts[3]),
                fov=float(parts[4]), width=int(parts[5]), height=int(parts[6]),
                position=(float(parts[7]), float(parts[8]), float(parts[9])),
            )
        except ValueError as e:
            raise FormatError(f"rig manifest line {ln}: {e}", ln) from e
        cameras.append(cam)
    return cameras
